//! Minimal hand-written SVG charts. Output depends only on the inputs, apart
//! from an optional timestamp comment.

use std::fmt::Write;

use dca_core::synthdata::Dataset;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

pub fn timestamp() -> String {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("rendered at unix time {secs}")
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn header(title: &str, stamp: Option<&str>) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#).unwrap();
    if let Some(t) = stamp {
        writeln!(s, "<!-- {t} -->").unwrap();
    }
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0).unwrap();
    s
}

/// Linear map of `[lo, hi]` onto the plot area along one axis.
struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, from: f64, to: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let margin = 0.05 * (hi - lo);
        Self { lo: lo - margin, hi: hi + margin, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

fn frame(s: &mut String, x: &Axis, y: &Axis, xlabel: &str, ylabel: &str) {
    writeln!(s, r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#999"/>"##, W - 2.0 * PAD, H - 2.0 * PAD).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 10.0).unwrap();
    writeln!(s, r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{ylabel}</text>"#, H / 2.0, H / 2.0).unwrap();
    for (v, anchor, px, py) in [
        (x.lo, "start", x.map(x.lo), H - PAD + 14.0),
        (x.hi, "end", x.map(x.hi), H - PAD + 14.0),
    ] {
        writeln!(s, r#"<text x="{px:.1}" y="{py:.1}" text-anchor="{anchor}">{v:.2}</text>"#).unwrap();
    }
    for v in [y.lo, y.hi] {
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, PAD - 4.0, y.map(v) + 4.0).unwrap();
    }
}

/// Parses the named numeric columns of a CSV with optional `#` comment lines.
pub fn read_columns(bytes: &[u8], names: &[&str]) -> Result<Vec<Vec<f64>>, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or("empty file")?.split(',').collect();
    let idx = names
        .iter()
        .map(|n| header.iter().position(|h| h == n).ok_or_else(|| format!("missing column {n}")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        for (c, &j) in idx.iter().enumerate() {
            let f = fields.get(j).ok_or_else(|| format!("row {} is short", i + 1))?;
            cols[c].push(f.trim().parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1))?);
        }
    }
    Ok(cols)
}

/// First two coordinates of the data, one colour per class, with
/// trajectories (`[z0s, z1s]`) drawn on top.
pub fn scatter(data: &Dataset, trajectories: &[Vec<Vec<f64>>], stamp: Option<&str>) -> String {
    let xs = data.points.iter().map(|p| p.z[0]).chain(trajectories.iter().flat_map(|t| t[0].iter().copied()));
    let ys = data.points.iter().map(|p| p.z[1]).chain(trajectories.iter().flat_map(|t| t[1].iter().copied()));
    let x = Axis::new(xs, PAD, W - PAD);
    let y = Axis::new(ys, H - PAD, PAD);
    let mut s = header("data and counterfactual trajectories", stamp);
    frame(&mut s, &x, &y, "z0", "z1");
    // Thin large splits so files stay small.
    let step = (data.len() / 1500).max(1);
    for p in data.points.iter().step_by(step) {
        writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{}" fill-opacity="0.5"/>"#, x.map(p.z[0]), y.map(p.z[1]), color(p.label)).unwrap();
    }
    for t in trajectories {
        let pts: Vec<String> = t[0].iter().zip(&t[1]).map(|(a, b)| format!("{:.2},{:.2}", x.map(*a), y.map(*b))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1"/>"#, pts.join(" ")).unwrap();
        if let (Some(a), Some(b)) = (t[0].last(), t[1].last()) {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#, x.map(*a), y.map(*b)).unwrap();
        }
    }
    for k in 0..data.num_classes {
        writeln!(s, r#"<text x="{}" y="{}" fill="{}">class {k}</text>"#, W - PAD - 50.0, PAD + 14.0 * (k + 1) as f64, color(k)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn quartiles(sorted: &[f64]) -> [f64; 5] {
    let q = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    [sorted[0], q(0.25), q(0.5), q(0.75), sorted[sorted.len() - 1]]
}

/// Box plot of finite `T_min` per direction from `[src, dst, t_min]` columns.
pub fn barrier_boxes(cols: &[Vec<f64>], stamp: Option<&str>) -> String {
    let mut groups: Vec<((usize, usize), Vec<f64>)> = Vec::new();
    for i in 0..cols[0].len() {
        let key = (cols[0][i] as usize, cols[1][i] as usize);
        let pos = groups.iter().position(|g| g.0 == key).unwrap_or_else(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        if cols[2][i].is_finite() {
            groups[pos].1.push(cols[2][i]);
        }
    }
    let y = Axis::new(groups.iter().flat_map(|g| g.1.iter().copied()), H - PAD, PAD);
    let x = Axis::new([0.0, groups.len() as f64].into_iter(), PAD, W - PAD);
    let mut s = header("minimum SDE horizon per direction", stamp);
    frame(&mut s, &x, &y, "direction", "T_min");
    let slot = (W - 2.0 * PAD) / groups.len().max(1) as f64;
    for (i, ((a, b), v)) in groups.iter_mut().enumerate() {
        let cx = PAD + slot * (i as f64 + 0.5);
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{a}→{b}</text>"#, H - PAD + 26.0).unwrap();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let [lo, q1, med, q3, hi] = quartiles(v).map(|q| y.map(q));
        let half = slot * 0.3;
        let c = color(i);
        writeln!(s, r#"<line x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="{c}"/>"#).unwrap();
        writeln!(s, r#"<rect x="{:.1}" y="{q3:.1}" width="{:.1}" height="{:.1}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#, cx - half, 2.0 * half, q1 - q3).unwrap();
        writeln!(s, r#"<line x1="{:.1}" y1="{med:.1}" x2="{:.1}" y2="{med:.1}" stroke="{c}" stroke-width="2"/>"#, cx - half, cx + half).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per series against its index.
pub fn lines(series: &[Vec<f64>], xlabel: &str, ylabel: &str, stamp: Option<&str>) -> String {
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    let x = Axis::new([0.0, n.saturating_sub(1) as f64].into_iter(), PAD, W - PAD);
    let y = Axis::new(series.iter().flatten().copied(), H - PAD, PAD);
    let mut s = header(&format!("{ylabel} per {xlabel}"), stamp);
    frame(&mut s, &x, &y, xlabel, ylabel);
    for (i, v) in series.iter().enumerate() {
        let pts: Vec<String> = v.iter().enumerate().map(|(j, val)| format!("{:.2},{:.2}", x.map(j as f64), y.map(*val))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#, pts.join(" "), color(i)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Mean of `with[k]` next to mean of `without[k]` for every class `k`.
pub fn paired_bars(with: &[Vec<f64>], without: &[Vec<f64>], ylabel: &str, stamp: Option<&str>) -> String {
    let mean = |v: &Vec<f64>| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let w: Vec<f64> = with.iter().map(mean).collect();
    let wo: Vec<f64> = without.iter().map(mean).collect();
    let y = Axis::new(w.iter().chain(&wo).copied().chain([0.0]), H - PAD, PAD);
    let x = Axis::new([0.0, w.len() as f64].into_iter(), PAD, W - PAD);
    let mut s = header(&format!("{ylabel} with (dark) and without (light) refinement"), stamp);
    frame(&mut s, &x, &y, "class", ylabel);
    let slot = (W - 2.0 * PAD) / w.len().max(1) as f64;
    let base = y.map(0.0);
    for k in 0..w.len() {
        let left = PAD + slot * k as f64 + slot * 0.15;
        for (j, (v, opacity)) in [(w[k], 0.9), (wo[k], 0.35)].into_iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let top = y.map(v);
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}" fill-opacity="{opacity}"/>"#,
                left + j as f64 * slot * 0.35,
                slot * 0.35,
                base - top,
                color(k)
            )
            .unwrap();
        }
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#, PAD + slot * (k as f64 + 0.5), H - PAD + 26.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
