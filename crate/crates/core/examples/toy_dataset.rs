//! Generates the biased training split and the anti-bias evaluation split
//! and prints a decoded sample from each.

use dualguide::data::{generate_dataset, text_prior_accuracy, Split};

fn main() -> dualguide::Result<()> {
    for split in [Split::TrainBiased, Split::EvalAnti] {
        let samples = generate_dataset(0, 2000, 4, 6, 0.8, split)?;
        let s = &samples[0];
        let (row, col) = s.query()?;
        println!("{split:?}: {} samples, text-prior accuracy {:.3}", samples.len(), text_prior_accuracy(&samples)?);
        println!(
            "  sample 0: cell ({row}, {col}) is color {}, tokens {:?} -> answer {}, biased {}",
            s.answer_color()?,
            s.question_tokens,
            s.answer_token,
            s.bias_flag
        );
        let v = s.vocab();
        println!("  vocab size {}, grid {}x{}, {} colors", v.size(), v.grid, v.grid, v.colors);
    }
    Ok(())
}
