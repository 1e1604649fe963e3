//! Implementations behind the CLI subcommands.

use std::path::Path;

use cdre_core::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use cdre_core::distortion::{deserialize, serialize, SIDE_HEADER_BYTES};
use cdre_core::eval::{
    bd_rate, overhead_report, rate_task_curve, run_ablation, AblationEval, AblationKind,
};
use cdre_core::nn::{Adam, ParamGroup};
use cdre_core::rng::derive_seed;
use cdre_core::training::{import_group_params, train, CdreModel, ModelKind, Regime};

use crate::config::RunConfig;
use crate::files;
use crate::{CliError, Result};

pub fn cmd_gen_data(seed: u64, n: usize, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let manifest = files::write_dataset(out, seed, n)?;
    println!("dataset_dir={}", out.display());
    println!("entries={}", manifest.entries.len());
    println!("config_hash={}", manifest.config_hash);
    Ok(())
}

/// Flag overrides applied to the config before anything else reads it.
#[derive(Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub regime: Option<String>,
    pub channels: Option<usize>,
    pub depth: Option<usize>,
}

pub fn apply_overrides(config: &mut RunConfig, o: &TrainOverrides) {
    if let Some(s) = o.seed {
        config.seed = s;
    }
    if let Some(r) = &o.regime {
        config.training.regime = r.clone();
    }
    if let Some(c) = o.channels {
        config.cdre.channels = c;
    }
    if let Some(d) = o.depth {
        config.cdre.embedding_depth = d;
    }
}

pub fn cmd_train(
    config_path: &Path,
    overrides: &TrainOverrides,
    resume: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    apply_overrides(&mut config, overrides);
    let train_cfg = config.train_config()?;
    let regime = train_cfg.regime;
    let kind = match regime {
        Regime::Backbone => ModelKind::Baseline,
        _ => ModelKind::Cdre,
    };
    let model_cfg = config.model_config(kind)?;

    let (mut model, mut adam, start_step) = match resume {
        Some(path) => {
            let LoadedCheckpoint {
                model, opt, step, ..
            } = load_checkpoint(&files::read_checkpoint(path)?)?;
            if model.cfg != model_cfg {
                return Err(CliError::Checkpoint(format!(
                    "checkpoint {} was produced by a different model configuration",
                    path.display()
                )));
            }
            let adam = opt.ok_or_else(|| {
                CliError::Checkpoint(format!(
                    "checkpoint {} carries no optimizer state to resume from",
                    path.display()
                ))
            })?;
            (model, adam, step)
        }
        None => {
            let mut model = CdreModel::new(model_cfg, config.seed)?;
            if kind == ModelKind::Cdre {
                if config.training.init_from.is_empty() {
                    eprintln!(
                        "note: training against a randomly initialized downstream model; \
                         set training.init_from to a pretrained baseline checkpoint"
                    );
                } else {
                    let base = load_checkpoint(&files::read_checkpoint(Path::new(
                        &config.training.init_from,
                    ))?)?;
                    import_group_params(
                        &mut model.store,
                        &base.model.store,
                        &[ParamGroup::Backbone, ParamGroup::Head],
                    )?;
                }
            }
            let adam = Adam::new(&model.store);
            (model, adam, 0)
        }
    };

    let records = train(&mut model, &mut adam, &train_cfg, start_step)?;
    let end_step = start_step + train_cfg.steps;
    let bytes = save_checkpoint(&model, end_step, Some(&adam), &config.echo());
    files::write_checkpoint(out, &bytes)?;

    println!("regime={}", regime.as_str());
    println!("steps={end_step}");
    if let Some(last) = records.last() {
        println!("final_loss={:.6}", last.loss.total);
        println!("final_task_loss={:.6}", last.loss.task);
    }
    println!("config_hash={:016x}", config.hash());
    println!("checkpoint={}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(CdreModel, u64)> {
    let loaded = load_checkpoint(&files::read_checkpoint(path)?)?;
    Ok((loaded.model, loaded.config_hash))
}

fn require_cdre(model: &CdreModel) -> Result<()> {
    if !model.is_cdre() {
        return Err(CliError::Checkpoint(
            "checkpoint lacks the distortion pipeline (baseline model)".into(),
        ));
    }
    Ok(())
}

pub fn cmd_encode_dist(
    original: &Path,
    compressed: &Path,
    checkpoint: &Path,
    out: &Path,
    base_bpp: f64,
) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    require_cdre(&model)?;
    let orig = files::load_image_png(original)?;
    let comp = files::load_image_png(compressed)?;
    let pair = cdre_core::codec::pair_from_entry(
        &format!("{} / {}", original.display(), compressed.display()),
        orig,
        comp,
        base_bpp,
    )?;
    let bits = model.encode_side_channel(&pair)?;
    let bytes = serialize(&bits);
    std::fs::write(out, &bytes)?;
    println!("side_bpp={:.6}", cdre_core::distortion::side_bpp(&bits)?);
    println!("payload_bytes={}", bytes.len() - SIDE_HEADER_BYTES);
    println!("header_bytes={SIDE_HEADER_BYTES}");
    println!("total_bytes={}", bytes.len());
    println!("bitstream={}", out.display());
    Ok(())
}

pub fn cmd_decode_dist(input: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    require_cdre(&model)?;
    let bytes = std::fs::read(input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", input.display())))?;
    let bits = deserialize(&bytes)?;
    let feature_set = model.decode_side_channel(&bits)?;
    // the decoded d_1 feature is what downstream embedding consumes first;
    // dump the raw decoder output too
    let decoded = match model.cfg.backbone.family {
        cdre_core::backbone::BackboneFamily::Cnn => model
            .cnn_decoder
            .as_ref()
            .expect("cdre cnn model has decoder")
            .decode(&model.store, &bits)?,
        cdre_core::backbone::BackboneFamily::Transformer => model
            .token_decoder
            .as_ref()
            .expect("cdre transformer model has decoder")
            .decode(&model.store, &bits)?,
    };
    files::write_feature(out, &decoded)?;
    let dims = match &decoded {
        cdre_core::distortion::DecodedDistortionFeature::Spatial(t) => format!("{:?}", t.shape()),
        cdre_core::distortion::DecodedDistortionFeature::Tokens(t) => format!("{:?}", t.shape()),
    };
    println!("decoded_dims={dims}");
    println!(
        "transformed_stages={}",
        match &feature_set {
            cdre_core::embedding::EmbeddingFeatureSet::Cnn(v) => v.len(),
            cdre_core::embedding::EmbeddingFeatureSet::Tokens(v) => v.len(),
        }
    );
    println!("feature={}", out.display());
    Ok(())
}

#[derive(Default)]
pub struct EvalArgs {
    pub qualities: Option<Vec<u8>>,
    pub include_side_channel: Option<bool>,
    pub label: Option<String>,
}

/// Effective config for eval-style commands: explicit file first, then
/// the config echoed into the checkpoint.
fn effective_config(config_path: Option<&Path>, echo: &str) -> Result<RunConfig> {
    match config_path {
        Some(p) => RunConfig::load(p),
        None => {
            if echo.is_empty() {
                Ok(RunConfig::default())
            } else {
                RunConfig::parse(echo)
            }
        }
    }
}

pub fn cmd_eval(
    checkpoint: &Path,
    config_path: Option<&Path>,
    args: &EvalArgs,
    out: &Path,
) -> Result<()> {
    let loaded = load_checkpoint(&files::read_checkpoint(checkpoint)?)?;
    let config = effective_config(config_path, &loaded.config_echo)?;
    let qualities = args
        .qualities
        .clone()
        .unwrap_or_else(|| config.eval.qualities.clone());
    let include = args
        .include_side_channel
        .unwrap_or(config.eval.include_side_channel);
    let label = args.label.clone().unwrap_or_else(|| {
        format!("{}-{}", loaded.model.cfg.kind.as_str(), loaded.step)
    });
    let samples = files::eval_samples(
        derive_seed(config.seed, "eval-data"),
        config.dataset.eval_n,
    )?;
    let curve = rate_task_curve(&loaded.model, &qualities, &samples, include, &label)?;
    files::write_curve(out, &curve, config.hash())?;
    println!("label={label}");
    for (b, m) in &curve.points {
        println!("point bpp={b:.6} metric={m:.4}");
    }
    println!("curve={}", out.display());
    Ok(())
}

pub fn cmd_bdrate(anchor: &Path, test: &Path) -> Result<()> {
    let a = files::read_curve(anchor)?;
    let t = files::read_curve(test)?;
    let v = bd_rate(&a, &t)?;
    println!("bd_rate_percent={v:.2}");
    Ok(())
}

pub fn cmd_overhead(checkpoint: &Path, height: usize, width: usize) -> Result<()> {
    let (model, hash) = load_model(checkpoint)?;
    let report = overhead_report(&model, height, width)?;
    println!("config_hash={hash:016x}");
    println!("resolution={width}x{height}");
    for (group, params) in &report.params_by_group {
        println!("params.{group}={params}");
    }
    for (group, macs) in &report.macs_per_pixel_by_group {
        println!("macs_per_pixel.{group}={macs:.2}");
    }
    let enc_params: usize = cdre_core::nn::ENCODER_SIDE_GROUPS
        .iter()
        .filter_map(|g| report.params_by_group.get(g.as_str()))
        .sum();
    let enc_macs: f64 = cdre_core::nn::ENCODER_SIDE_GROUPS
        .iter()
        .filter_map(|g| report.macs_per_pixel_by_group.get(g.as_str()))
        .sum();
    println!("encoder_side.params={enc_params}");
    println!("encoder_side.macs_per_pixel={enc_macs:.2}");
    println!("side_bpp={:.6}", report.side_bpp);
    Ok(())
}

pub fn cmd_ablate(kind: &str, config_path: &Path, out_dir: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let kind = AblationKind::from_str(kind)?;
    let base_model = config.model_config(ModelKind::Cdre)?;
    let base_train = config.train_config()?;
    if base_train.regime == Regime::Backbone {
        return Err(CliError::Usage(
            "ablations need training.regime = \"fd\" or \"joint\"".into(),
        ));
    }
    let eval = AblationEval {
        qualities: config.eval.qualities.clone(),
        eval_samples: files::eval_samples(
            derive_seed(config.seed, "eval-data"),
            config.dataset.eval_n,
        )?,
        include_side_channel: config.eval.include_side_channel,
        pretrain_steps: config.eval.pretrain_steps,
    };
    let table = run_ablation(kind, &base_model, &base_train, &eval)?;

    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::new();
    csv.push_str("# cdre-ablation v1\n");
    csv.push_str(&format!("# kind = {}\n", table.kind.as_str()));
    csv.push_str(&format!("# config_hash = {:016x}\n", config.hash()));
    csv.push_str("label,config_hash,bd_rate_percent,note\n");
    for row in &table.rows {
        let (bd, note) = match &row.bd_rate {
            Ok(v) => (format!("{v:.2}"), String::new()),
            Err(e) => (String::new(), e.clone()),
        };
        csv.push_str(&format!(
            "{},{:016x},{},{}\n",
            row.label, row.config_hash, bd, note
        ));
    }
    let table_path = out_dir.join(format!("ablation_{}.csv", table.kind.as_str()));
    std::fs::write(&table_path, &csv)?;

    let mut plot = String::new();
    plot.push_str(&format!("# config_hash = {:016x}\n", config.hash()));
    plot.push_str("series,bpp,metric\n");
    for (b, m) in &table.anchor.points {
        plot.push_str(&format!("anchor,{b},{m}\n"));
    }
    for row in &table.rows {
        for (b, m) in &row.curve.points {
            plot.push_str(&format!("{},{b},{m}\n", row.label));
        }
    }
    let plot_path = out_dir.join(format!("ablation_{}_plot.csv", table.kind.as_str()));
    std::fs::write(&plot_path, &plot)?;

    print!("{csv}");
    println!("table={}", table_path.display());
    println!("plot={}", plot_path.display());
    Ok(())
}
