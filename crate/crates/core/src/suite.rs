//! The full-operator gradient-check suite.
//!
//! One entry per differentiable operator, each checked in f64 against central
//! differences at `eps = 1e-5`, `tol = 1e-4`, on seeded random instances with
//! extents at most 8. Inputs that would sit on an activation kink (relu at 0,
//! clamp at its bounds, sampling exactly on a pixel center) are drawn away
//! from it; flow fields are randomized because the zero initialization would
//! park every coordinate exactly on the identity grid.

use crate::attention::{
    bica_fuse, channel_attention, flow_estimate, flow_warp, BicaConfig, MaskActivation,
    SemanticDomainConfig,
};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, NodeId};
use crate::model::{build_model, Model, ModelSpec, Variant};
use crate::ops::conv::{Conv2dParams, Padding};
use crate::ops::norm::GroupNormParams;
use crate::params::{param_seed, ParamNodes, ParameterSet};
use crate::tensor::Tensor;
use crate::train::{build_loss, LabelBatch};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

/// Outcome of one suite entry.
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand(shape: &[usize], lo: f64, hi: f64, name: &str) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, param_seed(0xC0FFEE, name)).expect("valid shape")
}

/// Uniform values with |x| in [margin, 1], keeping kinked activations away
/// from their kink by far more than the probe epsilon.
fn rand_off_zero(shape: &[usize], margin: f64, name: &str) -> Tensor<f64> {
    rand(shape, -1.0, 1.0, name)
        .map(|v| if v >= 0.0 { v * (1.0 - margin) + margin } else { v * (1.0 - margin) - margin })
}

fn square_sum(g: &mut Graph<f64>, x: NodeId) -> Result<NodeId> {
    let sq = g.mul(x, x)?;
    g.sum_all(sq)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &ParamNodes) -> Result<NodeId>>;

fn entry(name: &'static str, params: ParameterSet<f64>, build: Build) -> SuiteEntry {
    let report = grad_check(&move |g: &mut Graph<f64>, n: &ParamNodes| build(g, n), &params, SUITE_EPS, SUITE_TOL);
    SuiteEntry { name, report }
}

fn pair(a_name: &str, b_name: &str, shape: &[usize], lo: f64, hi: f64) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.insert("a", rand(shape, lo, hi, a_name)).unwrap();
    p.insert("b", rand(shape, lo, hi, b_name)).unwrap();
    p
}

fn elementwise_entries(out: &mut Vec<SuiteEntry>) {
    let shape = [2usize, 3, 4, 2];
    out.push(entry(
        "elementwise.add",
        pair("add.a", "add.b", &shape, -1.0, 1.0),
        Box::new(|g, n| {
            let y = g.add(n["a"], n["b"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "elementwise.sub",
        pair("sub.a", "sub.b", &shape, -1.0, 1.0),
        Box::new(|g, n| {
            let y = g.sub(n["a"], n["b"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "elementwise.mul",
        pair("mul.a", "mul.b", &shape, -1.0, 1.0),
        Box::new(|g, n| {
            let y = g.mul(n["a"], n["b"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "elementwise.div",
        {
            let mut p = ParameterSet::new();
            p.insert("a", rand(&shape, -1.0, 1.0, "div.a")).unwrap();
            p.insert("b", rand_off_zero(&shape, 0.4, "div.b")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.div(n["a"], n["b"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "elementwise.scale_add_scalar",
        {
            let mut p = ParameterSet::new();
            p.insert("a", rand(&shape, -1.0, 1.0, "scale.a")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.scale(n["a"], 0.7)?;
            let y = g.add_scalar(y, 0.3)?;
            square_sum(g, y)
        }),
    ));
}

fn activation_entries(out: &mut Vec<SuiteEntry>) {
    let shape = [1usize, 3, 4, 4];
    out.push(entry(
        "activation.relu",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand_off_zero(&shape, 0.1, "relu.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.relu(n["x"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "activation.sigmoid",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&shape, -2.0, 2.0, "sigmoid.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.sigmoid(n["x"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "activation.log",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&shape, 0.2, 2.0, "log.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.log(n["x"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "activation.softmax_ch",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&shape, -2.0, 2.0, "softmax.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.softmax_ch(n["x"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "activation.log_softmax_ch",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&shape, -2.0, 2.0, "logsoftmax.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.log_softmax_ch(n["x"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "activation.clamp_interior",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&shape, -0.4, 0.4, "clamp.in.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.clamp(n["x"], -0.5, 0.5)?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "activation.clamp_saturated",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&shape, 0.6, 1.4, "clamp.sat.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.clamp(n["x"], -0.5, 0.5)?;
            square_sum(g, y)
        }),
    ));
}

fn layout_entries(out: &mut Vec<SuiteEntry>) {
    out.push(entry(
        "layout.concat_ch",
        {
            let mut p = ParameterSet::new();
            p.insert("a", rand(&[1, 2, 3, 3], -1.0, 1.0, "cat.a")).unwrap();
            p.insert("b", rand(&[1, 3, 3, 3], -1.0, 1.0, "cat.b")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.concat_ch(&[n["a"], n["b"]])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "layout.permute_reshape",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&[2, 3, 2, 4], -1.0, 1.0, "perm.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.permute_bhwc(n["x"])?;
            let y = g.reshape(y, &[2, 8, 3, 1])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "layout.mul_channel_mask",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&[2, 3, 4, 4], -1.0, 1.0, "mask.x")).unwrap();
            p.insert("m", rand(&[2, 3, 1, 1], -1.0, 1.0, "mask.m")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.mul_channel_mask(n["x"], n["m"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "reduce.sum_per_channel",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&[2, 4, 3, 3], -1.0, 1.0, "spc.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.sum_per_channel(n["x"])?;
            square_sum(g, y)
        }),
    ));
}

fn conv_entries(out: &mut Vec<SuiteEntry>) {
    let mk_params = |tag: &str| {
        let mut p = ParameterSet::new();
        p.insert("input", rand(&[1, 2, 6, 6], -1.0, 1.0, &format!("{tag}.in"))).unwrap();
        p.insert("weight", rand(&[3, 2, 3, 3], -0.6, 0.6, &format!("{tag}.w"))).unwrap();
        p.insert("bias", rand(&[3], -0.5, 0.5, &format!("{tag}.b"))).unwrap();
        p
    };
    let cases: [(&'static str, Conv2dParams); 4] = [
        ("conv2d.same", Conv2dParams::default()),
        ("conv2d.dilated", Conv2dParams { dilation: 2, ..Conv2dParams::default() }),
        (
            "conv2d.strided",
            Conv2dParams { stride: 2, padding: Padding::Explicit(1), ..Conv2dParams::default() },
        ),
        (
            "conv2d.strided_dilated",
            Conv2dParams { stride: 2, dilation: 2, padding: Padding::SameEffective },
        ),
    ];
    for (name, conv) in cases {
        out.push(entry(
            name,
            mk_params(name),
            Box::new(move |g, n| {
                let y = g.conv2d(n["input"], n["weight"], n["bias"], conv)?;
                square_sum(g, y)
            }),
        ));
    }
}

fn norm_resample_entries(out: &mut Vec<SuiteEntry>) {
    out.push(entry(
        "group_norm",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&[2, 4, 3, 3], -1.0, 1.0, "gn.x")).unwrap();
            p.insert("gamma", rand(&[4], 0.5, 1.5, "gn.g")).unwrap();
            p.insert("beta", rand(&[4], -0.5, 0.5, "gn.b")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.group_norm(n["x"], n["gamma"], n["beta"], GroupNormParams { groups: 2, eps: 1e-5 })?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "upsample_bilinear",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&[1, 2, 3, 4], -1.0, 1.0, "up.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.upsample_bilinear(n["x"], 2)?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "block_mean",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&[1, 2, 4, 6], -1.0, 1.0, "bm.x")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.block_mean(n["x"], 2, 3)?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "sample_bilinear_normalized",
        {
            let mut p = ParameterSet::new();
            p.insert("x", rand(&[1, 2, 5, 5], -1.0, 1.0, "sm.x")).unwrap();
            p.insert("coords", rand(&[1, 3, 3, 2], -0.9, 0.9, "sm.c")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = g.sample_bilinear_normalized(n["x"], n["coords"])?;
            square_sum(g, y)
        }),
    ));
}

fn bica_cfg() -> BicaConfig {
    BicaConfig {
        channels: 4,
        feature_h: 8,
        feature_w: 8,
        semantic: SemanticDomainConfig::square(2),
        mask_activation: MaskActivation::Sigmoid,
    }
}

/// Junction parameter set with the zero-initialized flow projections replaced
/// by random values so the warp path is exercised off the identity.
fn bica_params(seed: u64) -> ParameterSet<f64> {
    let cfg = bica_cfg();
    let mut p = crate::params::init_parameters::<f64>(&cfg.param_defs("j."), seed).unwrap();
    for branch in ["b3", "b5"] {
        for leaf in ["conv2.weight", "conv2.bias"] {
            let name = format!("j.flow.{branch}.{leaf}");
            let shape = p.get(&name).unwrap().shape().to_vec();
            *p.get_mut(&name).unwrap() = rand(&shape, -0.02, 0.02, &name);
        }
    }
    p
}

fn attention_entries(out: &mut Vec<SuiteEntry>) {
    let with_inputs = |seed: u64, tag: &str| {
        let mut p = bica_params(seed);
        p.insert("input.o", rand(&[1, 4, 8, 8], -1.0, 1.0, &format!("{tag}.o"))).unwrap();
        p.insert("input.q", rand(&[1, 4, 8, 8], -1.0, 1.0, &format!("{tag}.q"))).unwrap();
        p
    };
    out.push(entry(
        "attention.channel",
        with_inputs(21, "ca"),
        Box::new(|g, n| {
            let y = channel_attention(g, n["input.o"], n["input.q"], n, "j.", &bica_cfg())?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "attention.flow_estimate",
        with_inputs(22, "fe"),
        Box::new(|g, n| {
            let y = flow_estimate(g, n["input.o"], n["input.q"], n, "j.")?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "attention.flow_warp",
        {
            let mut p = ParameterSet::new();
            p.insert("input.o", rand(&[1, 2, 6, 6], -1.0, 1.0, "fw.o")).unwrap();
            p.insert("flow", rand(&[1, 6, 6, 2], -0.08, 0.08, "fw.f")).unwrap();
            p
        },
        Box::new(|g, n| {
            let y = flow_warp(g, n["input.o"], n["flow"])?;
            square_sum(g, y)
        }),
    ));
    out.push(entry(
        "attention.bica_fuse",
        with_inputs(23, "bf"),
        Box::new(|g, n| {
            let y = bica_fuse(g, n["input.o"], n["input.q"], n, "j.", &bica_cfg())?;
            square_sum(g, y)
        }),
    ));
}

fn loss_entry(out: &mut Vec<SuiteEntry>) {
    let labels = {
        let t = rand(&[16], 0.0, 4.0, "loss.labels");
        LabelBatch::new((1, 4, 4), t.data().iter().map(|&v| v as u8).collect()).unwrap()
    };
    let mut p = ParameterSet::new();
    p.insert("logits", rand(&[1, 4, 4, 4], -1.0, 1.0, "loss.logits")).unwrap();
    out.push(entry(
        "loss",
        p,
        Box::new(move |g, n| Ok(build_loss(g, n["logits"], &labels)?.total)),
    ));
}

fn model_entry(
    out: &mut Vec<SuiteEntry>,
    name: &'static str,
    variant: Variant,
    levels: usize,
    seed: u64,
) {
    let spec = ModelSpec {
        input_extent: 8,
        ..ModelSpec::new(variant, levels, 4, 3)
    };
    let (model, mut params): (Model, ParameterSet<f64>) = build_model(&spec, seed).unwrap();
    // Flow projections are zero-initialized; randomize them like the
    // attention entries so the warp path carries gradient.
    let flow_names: Vec<String> = params
        .iter()
        .filter(|(n, _)| n.contains("flow.b") && n.contains("conv2"))
        .map(|(n, _)| n.clone())
        .collect();
    for name in flow_names {
        let shape = params.get(&name).unwrap().shape().to_vec();
        *params.get_mut(&name).unwrap() = rand(&shape, -0.02, 0.02, &name);
    }
    params.insert("input.x", rand(&[1, 1, 8, 8], 0.0, 1.0, "fwd.x")).unwrap();
    out.push(entry(
        name,
        params,
        Box::new(move |g, n| {
            let logits = model.forward(g, n, n["input.x"])?;
            square_sum(g, logits)
        }),
    ));
}

/// Run every operator check. All entries must pass for the build to be
/// considered differentiably correct.
pub fn run_operator_suite() -> Vec<SuiteEntry> {
    let mut out = Vec::new();
    elementwise_entries(&mut out);
    activation_entries(&mut out);
    layout_entries(&mut out);
    conv_entries(&mut out);
    norm_resample_entries(&mut out);
    attention_entries(&mut out);
    loss_entry(&mut out);
    model_entry(&mut out, "model.forward.unet", Variant::Unet, 2, 31);
    model_entry(&mut out, "model.forward.mfp_bica", Variant::MfpBica, 3, 32);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes_gradcheck() {
        for e in run_operator_suite() {
            assert!(
                e.report.pass,
                "{}: max rel err {} (fault: {:?})",
                e.name, e.report.max_rel_err, e.report.fault
            );
        }
    }
}
