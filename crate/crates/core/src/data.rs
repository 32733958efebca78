//! Synthetic patch-grid queries with a tunable language prior.
//!
//! Each sample is a `g × g` grid of colors seen as `g²` patches, plus the
//! question "which color is at (r, c)?". Bias lives in the grids, never in
//! the labels: on the biased training split the queried cell is set to
//! [`default_color`] with probability β, so the question alone predicts the
//! answer most of the time. The anti split never agrees with that prior.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelInput, VisualInput};
use crate::seed;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const QUERY: usize = 4;
const FIRST_ROW: usize = 5;

/// Text position whose next-token prediction is the answer.
pub const ANSWER_POSITION: usize = 3;

/// The color a text-only reader would guess for cell `(r, c)`.
pub fn default_color(r: usize, c: usize, grid: usize, colors: usize) -> usize {
    (r * grid + c) % colors
}

/// Token layout: specials, then `g` row tokens, `g` column tokens, `C` colors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub grid: usize,
    pub colors: usize,
}

impl Vocab {
    pub fn new(grid: usize, colors: usize) -> Self {
        Vocab { grid, colors }
    }

    pub fn size(&self) -> usize {
        FIRST_ROW + 2 * self.grid + self.colors
    }

    pub fn row_token(&self, r: usize) -> usize {
        FIRST_ROW + r
    }

    pub fn col_token(&self, c: usize) -> usize {
        FIRST_ROW + self.grid + c
    }

    pub fn color_token(&self, color: usize) -> usize {
        FIRST_ROW + 2 * self.grid + color
    }

    /// `[QUERY, row_r, col_c, SEP]`.
    pub fn tokenize_question(&self, r: usize, c: usize) -> Result<Vec<usize>> {
        if r >= self.grid || c >= self.grid {
            return Err(Error::contract(format!("cell ({r}, {c}) outside a {0}x{0} grid", self.grid)));
        }
        Ok(vec![QUERY, self.row_token(r), self.col_token(c), SEP])
    }

    pub fn parse_question(&self, tokens: &[usize]) -> Result<(usize, usize)> {
        let bad = || Error::contract(format!("not a question: {tokens:?}"));
        let [q, row, col, sep] = tokens else { return Err(bad()) };
        if *q != QUERY || *sep != SEP {
            return Err(bad());
        }
        let r = row.checked_sub(FIRST_ROW).filter(|&r| r < self.grid).ok_or_else(bad)?;
        let c = col.checked_sub(FIRST_ROW + self.grid).filter(|&c| c < self.grid).ok_or_else(bad)?;
        Ok((r, c))
    }

    pub fn detokenize_answer(&self, token: usize) -> Result<usize> {
        token
            .checked_sub(self.color_token(0))
            .filter(|&k| k < self.colors)
            .ok_or_else(|| Error::contract(format!("token {token} is not a color")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainBiased,
    EvalAnti,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::TrainBiased => "data/train-biased",
            Split::EvalAnti => "data/eval-anti",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "train-biased" => Ok(Split::TrainBiased),
            "eval" | "eval-anti" => Ok(Split::EvalAnti),
            _ => Err(Error::Config(format!("unknown split `{s}` (train-biased | eval-anti)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSample {
    pub grid: Vec<Vec<usize>>,
    pub question_tokens: Vec<usize>,
    pub answer_token: usize,
    /// `g²` rows of `one_hot(color) ++ [r/(g-1), c/(g-1)]`, row-major.
    pub patches: Vec<Vec<f64>>,
    /// The queried cell was forced to the default color.
    pub bias_flag: bool,
}

impl GridSample {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.grid.len(), self.patches.first().map_or(2, |p| p.len()) - 2)
    }

    pub fn query(&self) -> Result<(usize, usize)> {
        self.vocab().parse_question(&self.question_tokens)
    }

    pub fn answer_color(&self) -> Result<usize> {
        self.vocab().detokenize_answer(self.answer_token)
    }

    pub fn patch_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.patches)
    }

    /// Copy with every patch feature zeroed, for text-only baselines.
    pub fn blinded(&self) -> GridSample {
        GridSample {
            patches: self.patches.iter().map(|p| vec![0.0; p.len()]).collect(),
            ..self.clone()
        }
    }

    /// `question ++ [answer, EOS]`, supervised on the answer only unless
    /// `supervise_all_text`.
    pub fn to_model_input(&self, supervise_all_text: bool) -> Result<ModelInput> {
        let mut tokens = self.question_tokens.clone();
        tokens.extend([self.answer_token, EOS]);
        let mut input = ModelInput::new(VisualInput::Patches(self.patch_tensor()?), tokens);
        if supervise_all_text {
            let n = input.loss_mask.len();
            input.loss_mask[..n - 1].fill(true);
        } else {
            input.loss_mask[ANSWER_POSITION] = true;
        }
        Ok(input)
    }

    /// The question alone, ready for generation.
    pub fn prompt_input(&self) -> Result<ModelInput> {
        Ok(ModelInput::new(VisualInput::Patches(self.patch_tensor()?), self.question_tokens.clone()))
    }
}

fn patch_features(grid: &[Vec<usize>], colors: usize) -> Vec<Vec<f64>> {
    let g = grid.len();
    let scale = (g - 1) as f64;
    let mut out = Vec::with_capacity(g * g);
    for (r, row) in grid.iter().enumerate() {
        for (c, &color) in row.iter().enumerate() {
            let mut f = vec![0.0; colors + 2];
            f[color] = 1.0;
            f[colors] = r as f64 / scale;
            f[colors + 1] = c as f64 / scale;
            out.push(f);
        }
    }
    out
}

/// Deterministic from `seed`; sample `i` draws from its own sub-stream.
pub fn generate_dataset(seed: u64, n: usize, grid: usize, colors: usize, beta: f64, split: Split) -> Result<Vec<GridSample>> {
    if n == 0 || grid < 2 || colors < 2 {
        return Err(Error::contract(format!(
            "need n >= 1, grid >= 2, colors >= 2 (got n={n}, grid={grid}, colors={colors})"
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::contract(format!("beta {beta} outside [0, 1]")));
    }
    let vocab = Vocab::new(grid, colors);
    (0..n as u64)
        .map(|i| {
            let mut rng = seed::stream(seed, split.tag(), i);
            let mut cells: Vec<Vec<usize>> =
                (0..grid).map(|_| (0..grid).map(|_| rng.gen_range(0..colors)).collect()).collect();
            let (r, c) = (rng.gen_range(0..grid), rng.gen_range(0..grid));
            let default = default_color(r, c, grid, colors);
            let mut bias_flag = false;
            match split {
                Split::TrainBiased => {
                    if rng.gen::<f64>() < beta {
                        cells[r][c] = default;
                        bias_flag = true;
                    }
                }
                Split::EvalAnti => {
                    if cells[r][c] == default {
                        let k = rng.gen_range(0..colors - 1);
                        cells[r][c] = if k >= default { k + 1 } else { k };
                    }
                }
            }
            Ok(GridSample {
                question_tokens: vocab.tokenize_question(r, c)?,
                answer_token: vocab.color_token(cells[r][c]),
                patches: patch_features(&cells, colors),
                grid: cells,
                bias_flag,
            })
        })
        .collect()
}

/// Fraction of samples whose answer equals the text-only guess. On the
/// biased split this is the empirical bias rate; on any split it is the
/// accuracy of a model that ignores the image.
pub fn text_prior_accuracy(samples: &[GridSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        let v = s.vocab();
        let (r, c) = s.query()?;
        hits += usize::from(s.answer_color()? == default_color(r, c, v.grid, v.colors));
    }
    Ok(hits as f64 / samples.len() as f64)
}

pub fn write_jsonl(samples: &[GridSample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<GridSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: GridSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let g = sample.grid.len();
        if g < 2 || sample.grid.iter().any(|r| r.len() != g) || sample.patches.len() != g * g {
            return Err(Error::Parse {
                line: i + 1,
                message: "grid and patches disagree in shape".into(),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn question_round_trip_and_fixed_length() {
        let v = Vocab::new(4, 6);
        assert_eq!(v.parse_question(&v.tokenize_question(0, 1).unwrap()).unwrap(), (0, 1));
        let mut seen = std::collections::HashSet::new();
        for r in 0..4 {
            for c in 0..4 {
                let t = v.tokenize_question(r, c).unwrap();
                assert_eq!(t.len(), 4);
                assert!(seen.insert(t));
            }
        }
        assert!(v.tokenize_question(4, 0).is_err());
        assert!(v.detokenize_answer(v.color_token(6)).is_err());
        assert!(v.detokenize_answer(SEP).is_err());
        assert_eq!(v.size(), 19);
    }

    #[test]
    fn fully_biased_split_always_matches_default() {
        let s = generate_dataset(1, 500, 4, 6, 1.0, Split::TrainBiased).unwrap();
        assert_eq!(text_prior_accuracy(&s).unwrap(), 1.0);
        assert!(s.iter().all(|x| x.bias_flag));
    }

    #[test]
    fn anti_split_defeats_the_text_prior() {
        let s = generate_dataset(2, 2000, 4, 6, 0.8, Split::EvalAnti).unwrap();
        assert_eq!(text_prior_accuracy(&s).unwrap(), 0.0);
        assert!(generate_dataset(2, 10, 4, 1, 0.0, Split::EvalAnti).is_err());
    }

    #[test]
    fn bias_rate_is_calibrated() {
        let (beta, colors, n) = (0.8, 6, 10_000);
        let s = generate_dataset(3, n, 4, colors, beta, Split::TrainBiased).unwrap();
        let expected = beta + (1.0 - beta) / colors as f64;
        let sd = (expected * (1.0 - expected) / n as f64).sqrt();
        let rate = text_prior_accuracy(&s).unwrap();
        assert!((rate - expected).abs() <= 3.0 * sd, "rate {rate} vs {expected}");
        let u = (1.0 - beta) / colors as f64;
        assert!((0.79 + u..=0.81 + u).contains(&rate));
    }

    #[test]
    fn labels_and_patches_match_the_grid() {
        for split in [Split::TrainBiased, Split::EvalAnti] {
            for s in generate_dataset(4, 300, 3, 4, 0.5, split).unwrap() {
                let (r, c) = s.query().unwrap();
                assert_eq!(s.answer_color().unwrap(), s.grid[r][c]);
                assert_eq!(s.patches.len(), 9);
                let p = &s.patches[r * 3 + c];
                assert_eq!(p.len(), 6);
                assert_eq!(p[s.grid[r][c]], 1.0);
                assert_eq!((p[4], p[5]), (r as f64 / 2.0, c as f64 / 2.0));
            }
        }
    }

    #[test]
    fn training_input_supervises_only_the_answer() {
        let s = &generate_dataset(5, 1, 4, 6, 0.8, Split::TrainBiased).unwrap()[0];
        let input = s.to_model_input(false).unwrap();
        assert_eq!(input.text_tokens.len(), 6);
        assert_eq!(input.loss_mask.iter().filter(|&&m| m).count(), 1);
        assert_eq!(input.targets()[ANSWER_POSITION], s.answer_token);
        let all = s.to_model_input(true).unwrap();
        assert_eq!(all.loss_mask, vec![true, true, true, true, true, false]);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let s = generate_dataset(6, 100, 5, 7, 0.3, Split::TrainBiased).unwrap();
        write_jsonl(&s, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), s);
    }

    #[test]
    fn truncated_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&generate_dataset(7, 3, 4, 6, 0.8, Split::TrainBiased).unwrap(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 20]).unwrap();
        match read_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_jsonl(&path).unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generation_is_deterministic(seed in any::<u64>(), beta in 0.0f64..=1.0) {
            let a = generate_dataset(seed, 5, 3, 3, beta, Split::TrainBiased).unwrap();
            prop_assert_eq!(a, generate_dataset(seed, 5, 3, 3, beta, Split::TrainBiased).unwrap());
        }

        #[test]
        fn questions_are_bijective(g in 2usize..8, r in 0usize..8, c in 0usize..8) {
            prop_assume!(r < g && c < g);
            let v = Vocab::new(g, 3);
            prop_assert_eq!(v.parse_question(&v.tokenize_question(r, c).unwrap()).unwrap(), (r, c));
        }
    }
}
