//! One dual-mask attention head on a hand-built sequence of three visual
//! and three text tokens, checked against the brute-force loop.

use dualguide::attention::{brute_force_oracle, build_modality_masks, dual_attention_weights, mda_attention_head, Modality};
use dualguide::tensor::Tensor;

fn main() -> dualguide::Result<()> {
    use Modality::{Text, Visual};
    let tags = [Visual, Visual, Visual, Text, Text, Text];
    let n = tags.len();
    let grid = |cols: usize, f: fn(usize, usize) -> f64| {
        Tensor::matrix(n, cols, (0..n * cols).map(|x| f(x / cols, x % cols)).collect())
    };
    let q = grid(4, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.4 - 0.8)?;
    let k = grid(4, |i, j| ((i * 5 + j) % 7) as f64 * 0.3 - 0.9)?;
    let v = grid(2, |i, j| (i + j) as f64)?;

    let masks = build_modality_masks(&tags)?;
    let w = dual_attention_weights(&q, &k, &masks)?;
    println!("row  visual mass  text mass  W_I row / W_T row");
    for i in 0..n {
        let (vi, ti) = (w.visual.row(i), w.text.row(i));
        let fmt = |r: &[f64]| r.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
        println!(
            "{i:>3}  {:>11.3}  {:>9.3}  [{}] / [{}]",
            vi.iter().sum::<f64>(),
            ti.iter().sum::<f64>(),
            fmt(vi),
            fmt(ti)
        );
    }

    let (out, _) = mda_attention_head(&q, &k, &v, &tags)?;
    let oracle = brute_force_oracle(&q, &k, &v, &tags)?;
    println!("max |vectorized - brute force| = {:.2e}", out.max_abs_diff(&oracle));
    Ok(())
}
