//! Trains a small dual-mask model on color-biased data, then sweeps the
//! guidance scale on anti-bias questions. The first step of one sample is
//! shown with its conditional, null and guided top tokens.

use dualguide::data::{generate_dataset, Split};
use dualguide::decode::{decode_step, top5, DecodeConfig, GenerateOptions};
use dualguide::experiment::{evaluate, train_on};
use dualguide::model::ModelConfig;
use dualguide::train::TrainConfig;

fn main() -> dualguide::Result<()> {
    let train = generate_dataset(0, 2000, 3, 4, 0.8, Split::TrainBiased)?;
    let eval = generate_dataset(0, 300, 3, 4, 0.8, Split::EvalAnti)?;
    let model = ModelConfig {
        d_model: 32,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps: 400,
        ..TrainConfig::default()
    };
    let params = train_on(&model, &cfg, &train, false, None)?.params;

    for lambda in [0.0, 1.0, 1.5, 1.8, 2.0, 3.0] {
        let dc = DecodeConfig {
            lambda,
            max_new_tokens: 1,
            ..DecodeConfig::default()
        };
        let (report, _) = evaluate(&params, &eval, &dc, &GenerateOptions::default(), false)?;
        println!("lambda {lambda:.1}: anti-bias accuracy {:.3}", report.accuracy);
    }

    let s = &eval[0];
    let real = s.prompt_input()?;
    let null = real.to_null();
    let mut rng = dualguide::seed::stream(0, "decode", 0);
    let (token, l) = decode_step(&params, &real, &null, &DecodeConfig::default(), &mut rng)?;
    println!("sample 0 answer {}, guided pick {token}", s.answer_token);
    for (name, row) in [("conditional", &l.conditional), ("null", &l.null), ("guided", &l.guided)] {
        println!("  {name:<12}{:?}", top5(row).iter().map(|(t, _)| *t).collect::<Vec<_>>());
    }
    Ok(())
}
