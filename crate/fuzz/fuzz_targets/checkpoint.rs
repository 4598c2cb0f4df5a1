#![no_main]

use dca_core::classifier::Classifier;
use dca_core::diffusion::ScoreModel;
use dca_core::nn::checkpoint::{decode, encode, to_mlp};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((meta, params)) = decode(data) {
        let bytes = encode(&meta, &params).unwrap();
        let (meta2, params2) = decode(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(params2.iter().map(|p| p.to_bits()).collect::<Vec<_>>(), params.iter().map(|p| p.to_bits()).collect::<Vec<_>>());
        let _ = to_mlp(&meta, params);
    }
    let _ = ScoreModel::from_checkpoint(data);
    let _ = Classifier::from_checkpoint(data);
});
