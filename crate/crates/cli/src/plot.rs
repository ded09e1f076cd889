//! Attention matrices as grayscale images.

use std::io::Write;
use std::path::Path;

use convs2s::features::FeatureSequence;
use convs2s::inference::AttentionMatrix;
use convs2s::Real;

/// Source frames as the image height, output steps as the width, with
/// source frame 0 on the bottom row. Brightness is scaled to the maximum.
pub fn to_pgm(a: &AttentionMatrix) -> Vec<u8> {
    let max = a.data.iter().cloned().fold(0.0, Real::max);
    let mut out = format!("P5\n{} {}\n255\n", a.cols, a.rows).into_bytes();
    for r in (0..a.rows).rev() {
        for c in 0..a.cols {
            let v = if max > 0.0 { a.get(r, c) / max } else { 0.0 };
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_pgm(a: &AttentionMatrix, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_pgm(a))
}

/// Raw matrix as a feature sequence with one channel per source frame.
pub fn to_sequence(a: &AttentionMatrix, period_ms: f64) -> convs2s::Result<FeatureSequence> {
    FeatureSequence::new(a.rows, a.cols, period_ms, a.data.clone())
}

pub fn from_sequence(s: &FeatureSequence) -> AttentionMatrix {
    AttentionMatrix {
        rows: s.dim(),
        cols: s.len(),
        data: s.data().to_vec(),
    }
}
