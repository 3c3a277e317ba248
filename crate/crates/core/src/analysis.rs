//! Parameter and multiply-accumulate accounting, output-similarity
//! diagnostics and teacher/student gap tables.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dfpt::DualForwardTeacher;
use crate::error::{Error, Result};
use crate::losses::{kl_distillation, SoftPrediction};
use crate::models::{Layer, StagedModel};
use crate::nn::{BatchNorm2d, Conv2d, Group, Kind, Linear, Module};
use crate::tensor::Element;

/// Down-sampling rates and partial ratios of the prompt-block ablation grid.
pub const TABLE_VIII_R1: [[usize; 4]; 4] = [[1, 1, 1, 1], [2, 2, 2, 2], [4, 4, 4, 4], [2, 4, 6, 8]];
pub const TABLE_VIII_R2: [f64; 3] = [1.0, 0.5, 0.25];

/// One costed layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub group: Group,
    pub params: usize,
    pub macs: usize,
}

/// Per-layer parameters and MACs for one input shape. FLOPs are reported as
/// MACs; normalization and activations cost nothing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub input: [usize; 3],
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn params(&self, group: Group) -> usize {
        self.rows.iter().filter(|r| r.group == group).map(|r| r.params).sum()
    }

    pub fn macs(&self, group: Group) -> usize {
        self.rows.iter().filter(|r| r.group == group).map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> usize {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Rows whose name starts with `prefix`.
    pub fn filtered(&self, prefix: &str) -> CostReport {
        CostReport {
            input: self.input,
            rows: self.rows.iter().filter(|r| r.name.starts_with(prefix)).cloned().collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,group,params,macs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.name, r.group.label(), r.params, r.macs));
        }
        for g in [Group::Theta, Group::Phi, Group::Psi] {
            if self.rows.iter().any(|r| r.group == g) {
                out.push_str(&format!("total:{0},{0},{1},{2}\n", g.label(), self.params(g), self.macs(g)));
            }
        }
        out.push_str(&format!("total,all,{},{}\n", self.total_params(), self.total_macs()));
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let [c, h, w] = self.input;
        let mut out = format!("input {c}x{h}x{w}; FLOPs counted as multiply-accumulates\n");
        out.push_str(&format!("{:<width$}  {:>5}  {:>12}  {:>14}\n", "layer", "group", "params", "MACs"));
        for r in &self.rows {
            out.push_str(&format!("{:<width$}  {:>5}  {:>12}  {:>14}\n", r.name, r.group.label(), r.params, r.macs));
        }
        for g in [Group::Theta, Group::Phi, Group::Psi] {
            if self.rows.iter().any(|r| r.group == g) {
                let label = format!("total {}", g.label());
                out.push_str(&format!("{label:<width$}  {:>5}  {:>12}  {:>14}\n", "", self.params(g), self.macs(g)));
            }
        }
        out.push_str(&format!(
            "{:<width$}  {:>5}  {:>12}  {:>14}\n",
            "total",
            "",
            self.total_params(),
            self.total_macs()
        ));
        out
    }

    fn conv<T: Element>(&mut self, conv: &Conv2d<T>, hw: (usize, usize)) -> Result<(usize, usize)> {
        let (oh, ow) = match (conv.out_extent(hw.0), conv.out_extent(hw.1)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::DegenerateOutput {
                    input: alloc::vec![conv.in_channels(), hw.0, hw.1],
                })
            }
        };
        let k = conv.kernel();
        let per_pixel = conv.out_channels() * conv.in_channels() * k * k;
        let name = conv.weight.name.trim_end_matches(".weight").into();
        self.rows.push(CostRow {
            name,
            group: conv.weight.group,
            params: conv.weight.numel() + conv.bias.as_ref().map_or(0, |b| b.numel()),
            macs: oh * ow * per_pixel + conv.bias.as_ref().map_or(0, |_| oh * ow * conv.out_channels()),
        });
        Ok((oh, ow))
    }

    fn bn<T: Element>(&mut self, bn: &BatchNorm2d<T>) {
        let mut params = 0;
        bn.visit(&mut |p| {
            if p.kind == Kind::Weight {
                params += p.numel();
            }
        });
        self.rows.push(CostRow {
            name: bn.weight.name.trim_end_matches(".weight").into(),
            group: bn.weight.group,
            params,
            macs: 0,
        });
    }

    fn linear<T: Element>(&mut self, l: &Linear<T>) {
        let (i, o) = (l.in_features(), l.out_features());
        self.rows.push(CostRow {
            name: l.weight.name.trim_end_matches(".weight").into(),
            group: l.weight.group,
            params: i * o + o,
            macs: i * o,
        });
    }

    /// Costs the backbone stages, returning the spatial extent after each.
    fn stages<T: Element>(&mut self, model: &StagedModel<T>, hw: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        let mut hw = hw;
        let mut extents = Vec::with_capacity(model.stages.len());
        for stage in &model.stages {
            for layer in &stage.layers {
                match layer {
                    Layer::Plain(l) => {
                        hw = self.conv(&l.conv, hw)?;
                        self.bn(&l.bn);
                    }
                    Layer::Basic(b) => {
                        let mid = self.conv(&b.conv1, hw)?;
                        self.bn(&b.bn1);
                        let out = self.conv(&b.conv2, mid)?;
                        self.bn(&b.bn2);
                        if let Some((c, bn)) = &b.shortcut {
                            self.conv(c, hw)?;
                            self.bn(bn);
                        }
                        hw = out;
                    }
                }
            }
            extents.push(hw);
        }
        Ok(extents)
    }
}

fn check_input<T: Element>(model: &StagedModel<T>, input: [usize; 3]) -> Result<()> {
    if input[0] != model.arch.in_channels {
        return Err(Error::ChannelMismatch {
            expected: model.arch.in_channels,
            got: input[0],
        });
    }
    Ok(())
}

/// Costs of a plain staged model on a `C × H × W` input.
pub fn count_model<T: Element>(model: &StagedModel<T>, input: [usize; 3]) -> Result<CostReport> {
    check_input(model, input)?;
    let mut r = CostReport {
        input,
        rows: Vec::new(),
    };
    r.stages(model, (input[1], input[2]))?;
    r.linear(&model.head);
    Ok(r)
}

/// Costs of both teacher paths: θ rows for the backbone and head, φ rows for
/// prompt blocks, fusion blocks and the prompt-path head.
pub fn count_dual<T: Element>(dual: &DualForwardTeacher<T>, input: [usize; 3]) -> Result<CostReport> {
    check_input(&dual.teacher, input)?;
    let mut r = CostReport {
        input,
        rows: Vec::new(),
    };
    let extents = r.stages(&dual.teacher, (input[1], input[2]))?;
    r.linear(&dual.teacher.head);
    for (stage, &hw) in dual.prompts.iter().zip(&extents) {
        for (block, fusion) in &stage.pairs {
            r.conv(&block.down, hw)?;
            for u in &block.units {
                r.conv(&u.partial, hw)?;
                r.conv(&u.pointwise, hw)?;
            }
            r.conv(&block.up, hw)?;
            for c in &fusion.convs {
                r.conv(c, hw)?;
            }
        }
    }
    r.linear(&dual.head);
    Ok(r)
}

/// Prompt-block and fusion-block totals `(params, macs)` of a cost report.
pub fn prompt_totals(report: &CostReport) -> ((usize, usize), (usize, usize)) {
    let pick = |tag: &str| {
        let rows = report
            .rows
            .iter()
            .filter(|r| r.group == Group::Phi && r.name.split('.').nth(2).is_some_and(|s| s.starts_with(tag)));
        rows.fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    };
    (pick("p"), pick("f"))
}

/// `KL(a‖b)` without temperature compensation; lower is more similar.
pub fn kl_similarity(a: &SoftPrediction, b: &SoftPrediction) -> Result<f64> {
    kl_distillation(a, b, false)
}

/// `1 − p[t]`.
pub fn nontarget_mass(p: &SoftPrediction, t: usize) -> Result<f64> {
    let len = p.probs.len();
    p.probs
        .get(t)
        .map(|v| 1.0 - v)
        .ok_or(Error::IndexOutOfRange { index: t, len })
}

/// One teacher/student accuracy pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub method: String,
    pub teacher: f64,
    pub student: f64,
}

impl GapRow {
    /// Negative when the student wins.
    pub fn gap(&self) -> f64 {
        self.teacher - self.student
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
}

impl GapReport {
    pub fn new(rows: Vec<GapRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig("a gap report needs at least one row".into()));
        }
        Ok(Self { rows })
    }

    fn mean(&self, f: impl Fn(&GapRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean `(teacher, student, gap)`.
    pub fn averages(&self) -> (f64, f64, f64) {
        (self.mean(|r| r.teacher), self.mean(|r| r.student), self.mean(GapRow::gap))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,teacher,student,gap\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.2},{:.2},{:.2}\n", r.method, r.teacher, r.student, r.gap()));
        }
        let (t, s, g) = self.averages();
        out.push_str(&format!("average,{t:.2},{s:.2},{g:.2}\n"));
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>7}\n", "method", "teacher", "student", "gap");
        let line = |m: &str, t: f64, s: f64, g: f64| format!("{m:<width$}  {t:>8.2}  {s:>8.2}  {g:>7.2}\n");
        for r in &self.rows {
            out.push_str(&line(&r.method, r.teacher, r.student, r.gap()));
        }
        let (t, s, g) = self.averages();
        out.push_str(&line("average", t, s, g));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfpt::PromptConfig;
    use crate::losses::soften;
    use crate::models::ArchSpec;

    fn dual(arch: &str, r1: [usize; 4], r2: f64, kernels: &[usize]) -> DualForwardTeacher<f32> {
        let spec = ArchSpec::named(arch, 100).unwrap();
        let t = StagedModel::build(&spec, 0, "teacher", Group::Theta).unwrap();
        let mut cfg = PromptConfig::for_stages(4);
        cfg.r1 = r1.to_vec();
        cfg.r2 = r2;
        cfg.kernels = kernels.to_vec();
        DualForwardTeacher::new(t, cfg, 1).unwrap()
    }

    #[test]
    fn pointwise_conv_cost() {
        let mut r = CostReport::default();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let c: Conv2d<f32> = Conv2d::new("c", Group::Psi, 16, 16, 1, 1, 0, false, &mut rng);
        r.conv(&c, (8, 8)).unwrap();
        assert_eq!(r.rows[0].macs, 8 * 8 * 16 * 16);
        assert_eq!(r.rows[0].params, 256);
    }

    #[test]
    fn report_totals_match_enumeration() {
        for name in ["tiny-resnet-T", "tiny-resnet-S", "tiny-vgg-T", "tiny-vgg-S", "resnet8x4", "resnet14x4"] {
            let spec = ArchSpec::named(name, 10).unwrap();
            let m: StagedModel<f32> = StagedModel::build(&spec, 0, "m", Group::Psi).unwrap();
            let r = count_model(&m, [3, 32, 32]).unwrap();
            assert_eq!(r.total_params(), m.param_count(), "{name}");
            assert_eq!(r.params(Group::Psi), spec.analytic_params(), "{name}");
            assert_eq!(r.total_macs(), r.rows.iter().map(|x| x.macs).sum::<usize>());
        }
    }

    #[test]
    fn resnet14x4_macs_near_table_vii() {
        let spec = ArchSpec::named("resnet14x4", 100).unwrap();
        let m: StagedModel<f32> = StagedModel::build(&spec, 0, "m", Group::Theta).unwrap();
        let macs = count_model(&m, [3, 32, 32]).unwrap().total_macs() as f64;
        assert!((macs / 405.99e6 - 1.0).abs() < 0.02, "{macs}");
    }

    #[test]
    fn prompt_rows_match_closed_form() {
        let d = dual("resnet32x4", [4, 4, 4, 4], 0.5, &[3, 5, 7]);
        let r = count_dual(&d, [3, 32, 32]).unwrap();
        let ((pp, pm), (fp, fm)) = prompt_totals(&r);
        let channels = d.teacher.stage_channels();
        let (ap, af) = d.config.analytic_params(&channels).unwrap();
        assert_eq!((pp, fp), (ap, af));
        let (mp, mf) = d.config.analytic_macs(&channels, &[1024, 1024, 256, 64]).unwrap();
        assert_eq!((pm, fm), (mp, mf));
        let mut phi = 0;
        d.phi().visit(&mut |p| {
            if p.kind == Kind::Weight {
                phi += p.numel()
            }
        });
        assert_eq!(r.params(Group::Phi), phi);
    }

    #[test]
    fn macs_monotone_in_r1_and_r2() {
        let channels = [32, 128, 256, 512];
        let spatial = [1024, 1024, 256, 64];
        let macs = |r1: usize, r2: f64| {
            let mut c = PromptConfig::for_stages(4);
            c.r1 = alloc::vec![r1; 4];
            c.r2 = r2;
            c.analytic_macs(&channels, &spatial).unwrap().0
        };
        for r2 in TABLE_VIII_R2 {
            assert!(macs(1, r2) > macs(2, r2) && macs(2, r2) > macs(4, r2));
        }
        for r1 in [1, 2, 4] {
            assert!(macs(r1, 0.25) < macs(r1, 0.5) && macs(r1, 0.5) < macs(r1, 1.0));
        }
    }

    #[test]
    fn text_and_csv_render() {
        let spec = ArchSpec::named("tiny-resnet-S", 10).unwrap();
        let m: StagedModel<f32> = StagedModel::build(&spec, 0, "student", Group::Psi).unwrap();
        let r = count_model(&m, [3, 16, 16]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("layer,group,params,macs\n"));
        assert!(csv.contains(&format!("total,all,{},{}", r.total_params(), r.total_macs())));
        assert_eq!(r.to_text().lines().count(), r.rows.len() + 4);
        assert!(matches!(count_model(&m, [1, 16, 16]), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn similarity_and_mass() {
        let a = soften(&[1.0, 2.0, 0.5], 1.0).unwrap();
        let b = soften(&[0.2, -1.0, 3.0], 1.0).unwrap();
        assert_eq!(kl_similarity(&a, &a).unwrap(), 0.0);
        assert!((kl_similarity(&a, &b).unwrap() - kl_similarity(&b, &a).unwrap()).abs() > 1e-3);
        let oracle: f64 = a.probs.iter().zip(&b.probs).map(|(p, q)| p * (p / q).ln()).sum();
        assert!((kl_similarity(&a, &b).unwrap() - oracle).abs() < 1e-12);
        let u = soften(&[0.0; 10], 1.0).unwrap();
        assert!((nontarget_mass(&u, 3).unwrap() - 0.9).abs() < 1e-15);
        assert!(nontarget_mass(&u, 10).is_err());
    }

    #[test]
    fn gap_table() {
        let r = GapReport::new(alloc::vec![
            GapRow { method: "KD".into(), teacher: 79.42, student: 72.50 },
            GapRow { method: "same".into(), teacher: 70.0, student: 70.0 },
            GapRow { method: "win".into(), teacher: 70.0, student: 71.0 },
        ])
        .unwrap();
        assert!((r.rows[0].gap() - 6.92).abs() < 1e-9);
        assert_eq!(r.rows[1].gap(), 0.0);
        assert!(r.rows[2].gap() < 0.0);
        let (_, _, g) = r.averages();
        assert!((g - (6.92 + 0.0 - 1.0) / 3.0).abs() < 1e-9);
        assert!(r.to_csv().contains("KD,79.42,72.50,6.92"));
        assert_eq!(r.to_text().lines().count(), 5);
        assert!(GapReport::new(Vec::new()).is_err());
    }
}
