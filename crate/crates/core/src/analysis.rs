//! Closed-form parameter and FLOP accounting.
//!
//! Nothing here instantiates a model. Conventions, for one forward pass at
//! batch size 1:
//!
//! * conv block params: `Cout * (Cin * 27 + 1)` plus `2 * Cout` for batch norm
//! * fully connected params: `M * (N + 1)`
//! * conv FLOPs: `2 * 27 * Cin * Cout * output voxels` (one multiply-accumulate
//!   is two operations)
//! * fully connected FLOPs: `2 * M * N`
//! * batch norm, ReLU, pooling, fusion and sigmoid: one operation per output
//!   element

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{Architecture, BaseConfig, Fusion, FusionSpec, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub spec: ModelSpec,
    pub param_count: u64,
    pub flops: u64,
    pub per_layer: Vec<LayerCost>,
}

fn cube(side: usize) -> u64 {
    (side as u64).pow(3)
}

fn block_cost(name: String, base: &BaseConfig, layer: usize, cin: usize) -> LayerCost {
    let cout = base.width(layer) as u64;
    let cin = cin as u64;
    let vox = cube(base.side_before(layer));
    let mut flops = 2 * 27 * cin * cout * vox + 2 * cout * vox;
    if base.pools_after(layer) {
        flops += cout * cube(base.side_after(layer));
    }
    LayerCost {
        name,
        params: cout * (cin * 27 + 1) + 2 * cout,
        flops,
    }
}

/// Per-layer costs of any buildable model.
pub fn cost_report(spec: &ModelSpec) -> CostReport {
    let base = &spec.base;
    let l = base.num_layers;
    let mut layers = Vec::new();
    let (first_trunk, trunk_cin, last_width) = match spec.arch {
        Architecture::Single { input } => (1, input.channels(), base.width(l)),
        Architecture::Fused { alpha, beta } => {
            for branch in ["branch1", "branch2"] {
                let mut cin = 1;
                for layer in 1..=alpha {
                    layers.push(block_cost(format!("{branch}.block{layer}"), base, layer, cin));
                    cin = base.width(layer);
                }
            }
            let widen = if beta == Fusion::Concat { 2 } else { 1 };
            let fused_width = base.width(alpha) * widen;
            layers.push(LayerCost {
                name: format!("fusion{}", beta.symbol()),
                params: 0,
                flops: fused_width as u64 * cube(base.side_after(alpha)),
            });
            let last = if alpha == l { fused_width } else { base.width(l) };
            (alpha + 1, fused_width, last)
        }
    };
    let mut cin = trunk_cin;
    for layer in first_trunk..=l {
        layers.push(block_cost(format!("trunk.block{layer}"), base, layer, cin));
        cin = base.width(layer);
    }
    let flat = last_width as u64 * cube(base.side_after(l));
    let hidden = base.fc_hidden as u64;
    layers.push(LayerCost {
        name: "head.fc1".into(),
        params: hidden * (flat + 1),
        flops: 2 * hidden * flat + hidden,
    });
    layers.push(LayerCost {
        name: "head.fc2".into(),
        params: hidden + 1,
        flops: 2 * hidden + 1,
    });
    let name = spec.arch.label();
    CostReport {
        name,
        spec: spec.clone(),
        param_count: layers.iter().map(|c| c.params).sum(),
        flops: layers.iter().map(|c| c.flops).sum(),
        per_layer: layers,
    }
}

pub fn count_params(spec: &FusionSpec) -> u64 {
    cost_report(&ModelSpec::from(spec.clone())).param_count
}

pub fn count_flops(spec: &FusionSpec) -> u64 {
    cost_report(&ModelSpec::from(spec.clone())).flops
}

pub fn count_params_single(base: &BaseConfig, in_channels: usize) -> u64 {
    single_report(base, in_channels).param_count
}

pub fn count_flops_single(base: &BaseConfig, in_channels: usize) -> u64 {
    single_report(base, in_channels).flops
}

fn single_report(base: &BaseConfig, in_channels: usize) -> CostReport {
    use crate::model::BranchInput;
    let input = if in_channels == 2 {
        BranchInput::Stacked
    } else {
        BranchInput::Image
    };
    cost_report(&ModelSpec::single(base.clone(), input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{enumerate_space, Model};

    #[test]
    fn closed_form_matches_instantiation() {
        let base = BaseConfig::default();
        for spec in enumerate_space(&base) {
            let model = Model::build_fused(&spec, 0).unwrap();
            assert_eq!(count_params(&spec), model.param_count() as u64, "{}", spec.name());
        }
    }

    #[test]
    fn table_relations_hold() {
        let base = BaseConfig::default();
        let l = base.num_layers;
        let at = |alpha, beta| FusionSpec::new(alpha, beta, base.clone()).unwrap();
        for alpha in 1..=l {
            let add = at(alpha, Fusion::Add);
            let mul = at(alpha, Fusion::Mul);
            let cat = at(alpha, Fusion::Concat);
            assert_eq!(count_params(&add), count_params(&mul));
            assert_eq!(count_flops(&add), count_flops(&mul));
            assert!(count_params(&cat) > count_params(&add));
            assert!(count_flops(&cat) > count_flops(&add));
            if alpha > 1 {
                for beta in Fusion::ALL {
                    assert!(count_params(&at(alpha, beta)) >= count_params(&at(alpha - 1, beta)));
                    assert!(count_flops(&at(alpha, beta)) >= count_flops(&at(alpha - 1, beta)));
                }
            }
        }
    }

    #[test]
    fn layer_one_flops_scale_with_volume() {
        let big = BaseConfig::default();
        let small = BaseConfig {
            input_side: 16,
            pool_after: vec![1, 2, 3, 4],
            ..BaseConfig::default()
        };
        let conv1 = |b: &BaseConfig| 2 * 27 * b.width(1) as u64 * cube(b.input_side);
        let r_big = cost_report(&ModelSpec::from(FusionSpec::new(1, Fusion::Add, big.clone()).unwrap()));
        let r_small = cost_report(&ModelSpec::from(
            FusionSpec::new(1, Fusion::Add, small.clone()).unwrap(),
        ));
        assert_eq!(conv1(&big), 8 * conv1(&small));
        let f_big = r_big.per_layer[0].flops as f64;
        let f_small = r_small.per_layer[0].flops as f64;
        assert!((f_big / f_small - 8.0).abs() < 1e-9);
    }

    #[test]
    fn report_sums_per_layer() {
        let spec = FusionSpec::new(3, Fusion::Concat, BaseConfig::default()).unwrap();
        let r = cost_report(&ModelSpec::from(spec));
        assert_eq!(r.param_count, r.per_layer.iter().map(|c| c.params).sum::<u64>());
        assert_eq!(r.flops, r.per_layer.iter().map(|c| c.flops).sum::<u64>());
        assert_eq!(r.name, "FusionNet3⊕");
    }
}
