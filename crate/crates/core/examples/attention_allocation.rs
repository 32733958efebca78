//! Where a causal baseline looks while it generates: visual versus text
//! attention mass per layer and per generated token.

use dualguide::analysis::{layer_allocation, position_allocation, AllocationStats};
use dualguide::data::{generate_dataset, Split};
use dualguide::decode::DecodeConfig;
use dualguide::experiment::{attention_records, train_on};
use dualguide::model::{AttentionMode, ModelConfig};
use dualguide::train::TrainConfig;

fn show(title: &str, stats: &AllocationStats) {
    println!("{title}");
    for r in &stats.rows {
        println!(
            "  {:>2}  visual {:.3}  text {:.3}  (renormalized visual {:.3})",
            r.index, r.visual_share, r.text_share, r.visual_share_renorm
        );
    }
}

fn main() -> dualguide::Result<()> {
    let train = generate_dataset(0, 2000, 3, 4, 0.8, Split::TrainBiased)?;
    let eval = generate_dataset(0, 30, 3, 4, 0.8, Split::EvalAnti)?;
    let model = ModelConfig {
        d_model: 32,
        d_ff: 64,
        attention_mode: AttentionMode::Causal,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps: 300,
        ..TrainConfig::default()
    };
    let params = train_on(&model, &cfg, &train, false, None)?.params;
    let decode = DecodeConfig {
        lambda: 1.0,
        ..DecodeConfig::default()
    };
    let records = attention_records(&params, &eval, &decode, 10)?;
    show("by layer", &layer_allocation(&records)?);
    show("by generated token", &position_allocation(&records, 10)?);
    Ok(())
}
