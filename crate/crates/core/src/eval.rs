//! Rate-task curves, Bjøntegaard delta-rate, overhead accounting, and
//! the ablation harness.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::backbone::{task_metric, BackboneFamily};
use crate::codec::{compress_pair, CodecQuality};
use crate::data::SyntheticSample;
use crate::distortion::latent_dims;
use crate::error::{CdreError, Result};
use crate::nn::{Adam, LayerCost, ParamGroup, ParamStore};
use crate::training::{
    import_group_params, train, CdreModel, ModelConfig, ModelKind, Regime, TrainConfig,
};

/// Ordered rate/metric points for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RateTaskCurve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl RateTaskCurve {
    /// Points sorted by rate; validates positivity, finiteness, and
    /// strictly increasing bpp.
    fn sorted_points(&self) -> Result<Vec<(f64, f64)>> {
        let mut pts = self.points.clone();
        if pts.iter().any(|(b, m)| !(b.is_finite() && *b > 0.0) || !m.is_finite()) {
            return Err(CdreError::InvalidArgument(format!(
                "curve `{}` has non-finite or non-positive entries",
                self.label
            )));
        }
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if pts.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(CdreError::InvalidArgument(format!(
                "curve `{}` has duplicate bpp values",
                self.label
            )));
        }
        Ok(pts)
    }
}

/// Least-squares cubic fit `y ≈ Σ c_k x^k` via normal equations.
fn cubic_fit(xs: &[f64], ys: &[f64]) -> [f64; 4] {
    let n = xs.len();
    // moments up to x^6 and projections up to x^3 y
    let mut s = [0.0f64; 7];
    let mut t = [0.0f64; 4];
    for i in 0..n {
        let mut p = 1.0;
        for (k, sk) in s.iter_mut().enumerate() {
            *sk += p;
            if k < 4 {
                t[k] += p * ys[i];
            }
            p *= xs[i];
        }
    }
    let mut a = [[0.0f64; 5]; 4];
    for r in 0..4 {
        for c in 0..4 {
            a[r][c] = s[r + c];
        }
        a[r][4] = t[r];
    }
    // Gaussian elimination with partial pivoting
    for col in 0..4 {
        let mut piv = col;
        for r in col + 1..4 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        let d = a[col][col];
        for c in col..5 {
            a[col][c] /= d;
        }
        for r in 0..4 {
            if r != col && a[r][col] != 0.0 {
                let f = a[r][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    [a[0][4], a[1][4], a[2][4], a[3][4]]
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| {
        let x2 = x * x;
        c[0] * x + c[1] * x2 / 2.0 + c[2] * x2 * x / 3.0 + c[3] * x2 * x2 / 4.0
    };
    eval(hi) - eval(lo)
}

/// Bjøntegaard delta-rate in percent: average bitrate change of `test`
/// against `anchor` at equal task metric. Negative means savings.
///
/// Classic cubic formulation: fit `log10(bpp)` as a cubic in the metric
/// for both curves and integrate over the overlapping metric range.
pub fn bd_rate(anchor: &RateTaskCurve, test: &RateTaskCurve) -> Result<f64> {
    let a = anchor.sorted_points()?;
    let t = test.sorted_points()?;
    for (pts, label) in [(&a, &anchor.label), (&t, &test.label)] {
        if pts.len() < 4 {
            return Err(CdreError::InvalidArgument(format!(
                "curve `{label}` needs at least 4 points for BD-rate, has {}",
                pts.len()
            )));
        }
        if pts.windows(2).any(|w| w[0].1 >= w[1].1) {
            return Err(CdreError::NonMonotonicMetric);
        }
    }
    let lo = a[0].1.max(t[0].1);
    let hi = a[a.len() - 1].1.min(t[t.len() - 1].1);
    if !(hi > lo) {
        return Err(CdreError::DisjointQualityRanges);
    }
    let fit = |pts: &[(f64, f64)]| {
        let xs: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.0.log10()).collect();
        cubic_fit(&xs, &ys)
    };
    let ca = fit(&a);
    let ct = fit(&t);
    let avg_diff = (poly_integral(&ct, lo, hi) - poly_integral(&ca, lo, hi)) / (hi - lo);
    Ok((libm_pow10(avg_diff) - 1.0) * 100.0)
}

fn libm_pow10(x: f64) -> f64 {
    10.0f64.powf(x)
}

/// Exact scalar count of one named parameter group.
pub fn count_params(store: &ParamStore, group: &str) -> Result<usize> {
    let g = ParamGroup::from_str(group)?;
    Ok(store.count_scalars(g))
}

/// Groups whose parameters sit on the encoder side.
pub fn encoder_side_params(store: &ParamStore) -> usize {
    crate::nn::ENCODER_SIDE_GROUPS
        .iter()
        .map(|&g| store.count_scalars(g))
        .sum()
}

/// Analytic per-layer cost of every component at a source resolution.
pub fn cost_report(model: &CdreModel, h: usize, w: usize) -> Vec<LayerCost> {
    let mut out = Vec::new();
    if let Some(ex) = &model.extractor {
        out.extend(ex.costs(h, w));
    }
    if let Some(enc) = &model.encoder {
        out.extend(enc.costs(h, w));
    }
    if let Some(dec) = &model.cnn_decoder {
        out.extend(dec.costs(h, w));
    }
    if let Some(dec) = &model.token_decoder {
        out.extend(dec.costs(h, w));
    }
    if let Some(embedding) = &model.embedding {
        match embedding {
            crate::embedding::Embedding::Cnn(e) => {
                out.extend(e.transform.costs(h, w));
                // stage grids of the CNN backbone: /4 then /2 per stage
                let mut dims = (h.div_ceil(4), w.div_ceil(4));
                for (i, stage) in e.stages.iter().enumerate() {
                    for mut c in stage.costs(dims.0, dims.1) {
                        c.name = format!("embed.cnn{}.{}", i + 1, c.name);
                        out.push(c);
                    }
                    dims = (dims.0.div_ceil(2), dims.1.div_ceil(2));
                }
            }
            crate::embedding::Embedding::Token(e) => {
                let (lh, lw) = latent_dims(h, w);
                let d_tokens = lh * lw;
                out.extend(e.transform.costs(d_tokens));
                let side = crate::backbone::TRANSFORMER_INPUT_SIDE / crate::backbone::PATCH;
                for (i, stage) in e.stages.iter().enumerate() {
                    let f_tokens = (side >> i) * (side >> i);
                    for mut c in stage.costs(f_tokens, d_tokens) {
                        c.name = format!("embed.xattn{}.{}", i + 1, c.name);
                        out.push(c);
                    }
                }
            }
        }
    }
    out.extend(model.backbone.costs(h, w));
    out
}

/// Aggregated parameter/MACs accounting plus the side-channel rate.
#[derive(Clone, Debug)]
pub struct OverheadReport {
    pub params_by_group: BTreeMap<String, usize>,
    pub macs_per_pixel_by_group: BTreeMap<String, f64>,
    pub side_bpp: f64,
}

/// MACs-per-source-pixel by group at the given resolution, from the
/// analytic cost model.
pub fn macs_per_pixel(model: &CdreModel, h: usize, w: usize) -> Result<BTreeMap<String, f64>> {
    if h * w == 0 {
        return Err(CdreError::InvalidArgument(
            "resolution must be nonzero".to_string(),
        ));
    }
    let mut by_group: BTreeMap<String, f64> = BTreeMap::new();
    for c in cost_report(model, h, w) {
        *by_group.entry(c.group.as_str().to_string()).or_default() +=
            c.macs as f64 / (h * w) as f64;
    }
    Ok(by_group)
}

/// MACs per pixel summed over the encoder-side groups.
pub fn encoder_side_macs_per_pixel(model: &CdreModel, h: usize, w: usize) -> Result<f64> {
    let by_group = macs_per_pixel(model, h, w)?;
    Ok(crate::nn::ENCODER_SIDE_GROUPS
        .iter()
        .filter_map(|g| by_group.get(g.as_str()))
        .sum())
}

pub fn overhead_report(model: &CdreModel, h: usize, w: usize) -> Result<OverheadReport> {
    let mut params_by_group = BTreeMap::new();
    for g in model.store.present_groups() {
        params_by_group.insert(g.as_str().to_string(), model.store.count_scalars(g));
    }
    let macs_per_pixel_by_group = macs_per_pixel(model, h, w)?;
    let side_bpp = if model.is_cdre() {
        let (lh, lw) = latent_dims(h, w);
        (model.cfg.latent_channels * lh * lw) as f64 / (h * w) as f64
    } else {
        0.0
    };
    Ok(OverheadReport {
        params_by_group,
        macs_per_pixel_by_group,
        side_bpp,
    })
}

/// Accuracy and mean base rate of a model over samples compressed at a
/// fixed quality.
pub fn evaluate_at_quality(
    model: &CdreModel,
    samples: &[SyntheticSample],
    q: CodecQuality,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(CdreError::EmptyInput);
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut bpp = 0.0;
    for s in samples {
        let pair = compress_pair(&s.to_tensor(), q)?;
        bpp += pair.base_bpp;
        preds.push(model.predict(&pair)?);
        labels.push(s.label);
    }
    Ok((
        bpp / samples.len() as f64,
        task_metric(&preds, &labels)?,
    ))
}

/// Builds a rate-task curve: one point per quality, metric over the
/// evaluation samples, rate including the side channel when requested.
pub fn rate_task_curve(
    model: &CdreModel,
    qualities: &[u8],
    samples: &[SyntheticSample],
    include_side_channel: bool,
    label: &str,
) -> Result<RateTaskCurve> {
    if qualities.is_empty() {
        return Err(CdreError::InvalidArgument(
            "at least one quality is required".to_string(),
        ));
    }
    let side = if model.is_cdre() && include_side_channel {
        let (h, w) = (crate::data::IMAGE_SIDE, crate::data::IMAGE_SIDE);
        let (lh, lw) = latent_dims(h, w);
        (model.cfg.latent_channels * lh * lw) as f64 / (h * w) as f64
    } else {
        0.0
    };
    let mut points = Vec::with_capacity(qualities.len());
    for &q in qualities {
        let quality = CodecQuality::new(q)?;
        let (bpp, metric) = evaluate_at_quality(model, samples, quality)?;
        points.push((bpp + side, metric));
    }
    Ok(RateTaskCurve {
        label: label.to_string(),
        points,
    })
}

// ---- ablation harness ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    ExtractorParts,
    EmbeddingDepth,
    Channels,
}

impl AblationKind {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "extractor_parts" | "extractor-parts" => Ok(Self::ExtractorParts),
            "embedding_depth" | "embedding-depth" => Ok(Self::EmbeddingDepth),
            "channels" => Ok(Self::Channels),
            other => Err(CdreError::InvalidArgument(format!(
                "unknown ablation kind `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ExtractorParts => "extractor_parts",
            Self::EmbeddingDepth => "embedding_depth",
            Self::Channels => "channels",
        }
    }
}

/// Canonical fingerprint of a variant configuration.
pub fn config_fingerprint(model: &ModelConfig, use_cosine_reg: bool) -> u64 {
    let s = format!(
        "kind={} family={} dims={:?} channels={} depth={} conditioning={} multi_scale={} token_dim={} cosine_reg={}",
        model.kind.as_str(),
        model.backbone.family.as_str(),
        model.backbone.stage_dims,
        model.latent_channels,
        model.embedding_depth,
        model.conditioning.as_str(),
        model.multi_scale,
        model.token_dim,
        use_cosine_reg,
    );
    crate::rng::fnv1a64(s.as_bytes())
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub model_cfg: ModelConfig,
    pub use_cosine_reg: bool,
    pub config_hash: u64,
    /// BD-rate versus the anchor, or the reason it could not be computed
    /// (desk-scale curves are not always monotone).
    pub bd_rate: core::result::Result<f64, String>,
    pub curve: RateTaskCurve,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub anchor: RateTaskCurve,
    pub rows: Vec<AblationRow>,
}

/// Evaluation settings of the ablation harness.
#[derive(Clone, Debug)]
pub struct AblationEval {
    pub qualities: Vec<u8>,
    pub eval_samples: Vec<SyntheticSample>,
    pub include_side_channel: bool,
    /// Steps for the shared baseline pretraining run.
    pub pretrain_steps: u64,
}

/// The variant grid of one ablation kind, as `(label, model config,
/// cosine regularizer flag)`.
pub fn ablation_variants(
    kind: AblationKind,
    base: &ModelConfig,
) -> Vec<(String, ModelConfig, bool)> {
    match kind {
        AblationKind::Channels => [1usize, 3, 6, 10, 16]
            .iter()
            .map(|&c| {
                let mut cfg = *base;
                cfg.latent_channels = c;
                (format!("channels={c}"), cfg, true)
            })
            .collect(),
        AblationKind::EmbeddingDepth => (1..=4)
            .map(|d| {
                let mut cfg = *base;
                cfg.embedding_depth = d;
                (format!("depth={d}"), cfg, true)
            })
            .collect(),
        AblationKind::ExtractorParts => {
            let rows: [(&str, bool, bool, crate::distortion::Conditioning); 4] = [
                ("multi=on cosine=off modulation=on", true, false, crate::distortion::Conditioning::Modulation),
                ("multi=off cosine=on modulation=on", false, true, crate::distortion::Conditioning::Modulation),
                ("multi=off cosine=off modulation=on", false, false, crate::distortion::Conditioning::Modulation),
                ("multi=on cosine=on modulation=off", true, true, crate::distortion::Conditioning::Concat),
            ];
            rows.iter()
                .map(|&(label, multi, cosine, cond)| {
                    let mut cfg = *base;
                    cfg.multi_scale = multi;
                    cfg.conditioning = cond;
                    (label.to_string(), cfg, cosine)
                })
                .collect()
        }
    }
}

/// Trains and evaluates every variant of an ablation under identical
/// seeds, reporting BD-rate against the shared frozen baseline.
pub fn run_ablation(
    kind: AblationKind,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    eval: &AblationEval,
) -> Result<AblationTable> {
    if base_model.kind != ModelKind::Cdre {
        return Err(CdreError::InvalidArgument(
            "ablations require a distortion-pipeline model".to_string(),
        ));
    }
    // Shared anchor: pretrained downstream model, directly on compressed
    // inputs.
    let mut baseline = CdreModel::new(
        ModelConfig {
            kind: ModelKind::Baseline,
            ..*base_model
        },
        base_train.seed,
    )?;
    let mut pre_cfg = base_train.clone();
    pre_cfg.regime = Regime::Backbone;
    pre_cfg.steps = eval.pretrain_steps;
    let mut opt = Adam::new(&baseline.store);
    train(&mut baseline, &mut opt, &pre_cfg, 0)?;
    let anchor = rate_task_curve(
        &baseline,
        &eval.qualities,
        &eval.eval_samples,
        false,
        "anchor",
    )?;

    let mut rows = Vec::new();
    for (label, cfg, cosine) in ablation_variants(kind, base_model) {
        let mut model = CdreModel::new(cfg, base_train.seed)?;
        import_group_params(
            &mut model.store,
            &baseline.store,
            &[ParamGroup::Backbone, ParamGroup::Head],
        )?;
        let mut run_cfg = base_train.clone();
        run_cfg.use_cosine_reg = cosine;
        let mut opt = Adam::new(&model.store);
        train(&mut model, &mut opt, &run_cfg, 0)?;
        let curve = rate_task_curve(
            &model,
            &eval.qualities,
            &eval.eval_samples,
            eval.include_side_channel,
            &label,
        )?;
        let bd = bd_rate(&anchor, &curve).map_err(|e| e.to_string());
        rows.push(AblationRow {
            label,
            model_cfg: cfg,
            use_cosine_reg: cosine,
            config_hash: config_fingerprint(&cfg, cosine),
            bd_rate: bd,
            curve,
        });
    }
    Ok(AblationTable {
        kind,
        anchor,
        rows,
    })
}

/// Convenience: which groups exist on a freshly built model of a family.
pub fn default_groups(family: BackboneFamily) -> Vec<&'static str> {
    let model = CdreModel::new(ModelConfig::cdre(family), 0).unwrap();
    model
        .store
        .present_groups()
        .into_iter()
        .map(|g| g.as_str())
        .collect()
}

/// Shape audit helper: `(family, stage)` grid/token dims every embedding
/// stage must match, checked against a live backbone forward.
pub fn stage_shape_audit(model: &CdreModel, side: usize) -> Result<Vec<Vec<usize>>> {
    let mut tape = crate::graph::Tape::new();
    let img = tape.constant(crate::tensor::Tensor::zeros(&[3, side, side]));
    let out = model.backbone.forward(&mut tape, &model.store, img, None)?;
    Ok(out
        .stages
        .iter()
        .map(|&s| tape.value(s).shape().to_vec())
        .collect())
}
