//! Structural multiply-accumulate and parameter counting.
//!
//! One multiply-accumulate counts as one FLOP. Convolutions cost
//! `OH * OW * O * C * k * k`, matrix products `M * K * N`; softmax, ReLU,
//! batch norm, pooling and additions are free. Counts are per sample.

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::VtError;
use crate::model::{Architecture, Family, LayerKind, ShapeFlow, Stage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub flops: u64,
    pub params: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.flops += o.flops;
        self.params += o.params;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub stage: Stage,
    pub cost: Cost,
    /// `[C, H, W]` after the layer.
    pub output: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub family: Family,
    pub input_hw: usize,
    pub layers: Vec<LayerCost>,
    pub stages: IndexMap<Stage, Cost>,
    pub total: Cost,
}

fn analyze(arch: &Architecture, input_hw: usize) -> Result<CostReport, VtError> {
    let mut flow = ShapeFlow { c: 3, h: input_hw, w: input_hw, ..Default::default() };
    let ends = arch.stage_ends();
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut stages: IndexMap<Stage, Cost> = Stage::ALL.iter().map(|s| (*s, Cost::default())).collect();
    let mut total = Cost::default();
    for (i, layer) in arch.layers.iter().enumerate() {
        let flops = layer.kind.macs(&mut flow)?;
        let params = layer.kind.param_specs().iter().map(|p| p.numel()).sum();
        let cost = Cost { flops, params };
        if ends.contains(&i) {
            flow.pyramid.push((flow.c, flow.h, flow.w));
        }
        let output = match layer.kind {
            LayerKind::PoolHead { classes, .. } | LayerKind::TokenHead { classes, .. } => [classes, 1, 1],
            _ => [flow.c, flow.h, flow.w],
        };
        *stages.get_mut(&layer.stage).expect("all stages present") += cost;
        total += cost;
        layers.push(LayerCost { name: layer.name.clone(), stage: layer.stage, cost, output });
    }
    Ok(CostReport { family: arch.config.family, input_hw, layers, stages, total })
}

/// Parameter counts (weights, biases and batch-norm affine terms) at the
/// model's configured resolution.
pub fn count_params(arch: &Architecture) -> Result<CostReport, VtError> {
    analyze(arch, arch.input_size())
}

/// Multiply-accumulates for a square `input_hw` image.
pub fn count_flops(arch: &Architecture, input_hw: usize) -> Result<CostReport, VtError> {
    analyze(arch, input_hw)
}

fn ratio(base: u64, vt: u64) -> f64 {
    if base == vt {
        1.0
    } else if vt == 0 {
        f64::INFINITY
    } else {
        base as f64 / vt as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ratio {
    pub flops: f64,
    pub params: f64,
}

/// Baseline-over-VT cost ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionReport {
    pub family: Family,
    pub input_hw: usize,
    pub baseline: CostReport,
    pub vt: CostReport,
    pub stages: IndexMap<Stage, Ratio>,
    pub total: Ratio,
}

pub fn reduction_report(vt: &Architecture, baseline: &Architecture, input_hw: usize) -> Result<ReductionReport, VtError> {
    if vt.config.family != baseline.config.family {
        return Err(VtError::Config(format!(
            "family mismatch: {} vs {}",
            vt.config.family, baseline.config.family
        )));
    }
    let v = count_flops(vt, input_hw)?;
    let b = count_flops(baseline, input_hw)?;
    let stages = Stage::ALL
        .iter()
        .map(|s| {
            let (bc, vc) = (b.stages[s], v.stages[s]);
            (*s, Ratio { flops: ratio(bc.flops, vc.flops), params: ratio(bc.params, vc.params) })
        })
        .collect();
    let total = Ratio { flops: ratio(b.total.flops, v.total.flops), params: ratio(b.total.params, v.total.params) };
    Ok(ReductionReport { family: vt.config.family, input_hw, baseline: b, vt: v, stages, total })
}

/// MACs of the VT-FPN token path (tokenizers, adapters, transformer,
/// projectors) next to a conventional FPN path with `channels`-wide lateral
/// 1x1 and output 3x3 convs over the same levels.
pub fn fpn_path_comparison(arch: &Architecture, input_hw: usize, channels: usize) -> Result<(u64, u64), VtError> {
    let report = count_flops(arch, input_hw)?;
    let Some(LayerKind::Fpn(f)) = arch.layers.last().map(|l| &l.kind) else {
        return Err(VtError::Config("model has no FPN head".into()));
    };
    let pyramid: Vec<[usize; 3]> = arch.stage_ends().into_iter().map(|i| report.layers[i].output).collect();
    let fpn_total = report.layers.last().expect("fpn layer").cost.flops;
    let h2w2 = (pyramid[0][1] * pyramid[0][2]) as u64;
    let mut head = h2w2 * (f.head_channels * f.classes) as u64;
    let mut conv = 0;
    for lv in &f.levels {
        let [c, h, w] = pyramid[lv.stage - 2];
        let p = (h * w) as u64;
        head += p * (c * f.head_channels) as u64;
        conv += p * (c * channels) as u64 + p * (channels * channels * 9) as u64;
    }
    Ok((fpn_total - head, conv))
}

fn stage_json(stages: &IndexMap<Stage, impl Serialize>, total: &impl Serialize) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (s, c) in stages {
        map.insert(s.to_string(), serde_json::to_value(c).expect("plain data"));
    }
    map.insert("total".into(), serde_json::to_value(total).expect("plain data"));
    serde_json::Value::Object(map)
}

fn millions(v: u64) -> String {
    format!("{:.3}M", v as f64 / 1e6)
}

impl CostReport {
    /// `{"stage1": {"flops": .., "params": ..}, .., "total": {..}}`.
    pub fn to_json(&self) -> serde_json::Value {
        stage_json(&self.stages, &self.total)
    }

    pub fn layer_table(&self) -> String {
        let mut out = format!("{:<12} {:<8} {:>16} {:>14} {:>12}\n", "layer", "stage", "output", "flops", "params");
        for l in &self.layers {
            let [c, h, w] = l.output;
            out += &format!(
                "{:<12} {:<8} {:>16} {:>14} {:>12}\n",
                l.name,
                l.stage.to_string(),
                format!("{c}x{h}x{w}"),
                l.cost.flops,
                l.cost.params
            );
        }
        out
    }

    pub fn stage_table(&self) -> String {
        let mut out = format!("{:<8} {:>14} {:>12}\n", "stage", "flops", "params");
        for (s, c) in &self.stages {
            out += &format!("{:<8} {:>14} {:>12}\n", s.to_string(), millions(c.flops), millions(c.params));
        }
        out + &format!("{:<8} {:>14} {:>12}\n", "total", millions(self.total.flops), millions(self.total.params))
    }
}

impl ReductionReport {
    pub fn to_json(&self) -> serde_json::Value {
        stage_json(&self.stages, &self.total)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>14} {:>14} {:>8} {:>12} {:>12} {:>8}\n",
            "stage", "base flops", "vt flops", "ratio", "base params", "vt params", "ratio"
        );
        let rows = self.stages.iter().map(|(s, r)| (s.to_string(), self.baseline.stages[s], self.vt.stages[s], *r));
        let total = ("total".to_string(), self.baseline.total, self.vt.total, self.total);
        for (label, b, v, r) in rows.chain(std::iter::once(total)) {
            out += &format!(
                "{:<8} {:>14} {:>14} {:>7.2}x {:>12} {:>12} {:>7.2}x\n",
                label,
                millions(b.flops),
                millions(v.flops),
                r.flops,
                millions(b.params),
                millions(v.params),
                r.params
            );
        }
        out
    }
}
