//! Finite-difference audit of every operation and every composite loss on a
//! tiny two-skeleton setup, runnable outside the test harness.

use crate::crossdomain::{cross_losses, total_loss, JointModel, LossWeights};
use crate::datagen::generate_motion;
use crate::motionae::{ae_losses, ModelConfig, MotionBatch};
use crate::rng::Rng;
use crate::skeleton::{build_skeleton, intersect_primal, PrimalCorrespondence, SkeletonGraph};
use crate::tensor::{Binding, Graph, ParamStore, TensorId};
use crate::textembed::{subject_swap, EmbeddingProvider, HashEmbedder};

const FD_H: f64 = 1e-5;

/// 5-joint biped stand-in: root branches into spine->head, left, right.
pub fn toy_human() -> SkeletonGraph {
    build_skeleton(
        "toy_h",
        vec![
            "pelvis".into(),
            "spine".into(),
            "head".into(),
            "left_hip".into(),
            "right_hip".into(),
        ],
        vec![-1, 0, 1, 0, 0],
        vec![
            [0.0, 0.2, 0.0],
            [0.0, 0.25, 0.0],
            [0.1, -0.3, 0.0],
            [-0.1, -0.3, 0.0],
        ],
        vec![2, 3, 4],
    )
    .unwrap()
}

/// 6-joint quadruped stand-in with an unmatched tail branch.
pub fn toy_animal() -> SkeletonGraph {
    build_skeleton(
        "toy_a",
        vec![
            "root".into(),
            "body".into(),
            "head".into(),
            "left_leg".into(),
            "right_leg".into(),
            "tail".into(),
        ],
        vec![-1, 0, 1, 1, 1, 1],
        vec![
            [0.0, 0.0, 0.1],
            [0.0, 0.1, 0.2],
            [0.1, -0.25, 0.0],
            [-0.1, -0.25, 0.0],
            [0.0, 0.0, -0.2],
        ],
        vec![2, 3, 4],
    )
    .unwrap()
}

pub fn toy_correspondence(h: &SkeletonGraph, a: &SkeletonGraph) -> PrimalCorrespondence {
    intersect_primal(
        h,
        a,
        &[
            ("root".into(), "pelvis".into(), "root".into()),
            ("head".into(), "head".into(), "head".into()),
            ("left".into(), "left_hip".into(), "left_leg".into()),
            ("right".into(), "right_hip".into(), "right_leg".into()),
        ],
    )
    .unwrap()
}

pub fn toy_model(seed: u64) -> JointModel<f64> {
    let h = toy_human();
    let a = toy_animal();
    let corr = toy_correspondence(&h, &a);
    JointModel::new(ModelConfig::toy(), h, a, corr, seed).expect("toy model")
}

/// Outcome of one finite-difference audit.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.worst_rel.is_finite() && self.worst_rel < self.tolerance
    }
}

/// Compare analytic parameter gradients against central finite differences
/// over `probes` randomly chosen parameter coordinates.
pub fn fd_check_store<F>(
    name: &str,
    store: &ParamStore<f64>,
    build: F,
    probes: usize,
    tolerance: f64,
    seed: u64,
) -> FdReport
where
    F: Fn(&mut Graph<f64>, &Binding) -> TensorId,
{
    let eval = |store: &ParamStore<f64>| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let loss = build(&mut g, &bind);
        g.backward(loss).expect("scalar loss");
        let grads = store.collect_grads(&g, &bind);
        (g.scalar(loss), grads)
    };
    let (_, grads) = eval(store);
    let total: usize = store.total_values();
    let mut rng = Rng::keyed(seed, &[0xfdfd]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..probes {
        let mut flat = rng.below(total);
        let mut entry = 0;
        while flat >= store.entries[entry].values.len() {
            flat -= store.entries[entry].values.len();
            entry += 1;
        }
        let mut plus = store.clone();
        plus.entries[entry].values[flat] += FD_H;
        let (fp, _) = eval(&plus);
        let mut minus = store.clone();
        minus.entries[entry].values[flat] -= FD_H;
        let (fm, _) = eval(&minus);
        let fd = (fp - fm) / (2.0 * FD_H);
        let an = grads[entry][flat];
        let denom = 1.0_f64.max(an.abs()).max(fd.abs());
        worst = worst.max((an - fd).abs() / denom);
        checked += 1;
    }
    FdReport {
        name: name.to_string(),
        checked,
        worst_rel: worst,
        tolerance,
    }
}

struct ToyFixture {
    model: JointModel<f64>,
    h_motions: Vec<crate::motion::MotionSequence>,
    h_caps: Vec<f64>,
    h_caps_swapped: Vec<f64>,
    a_motions: Vec<crate::motion::MotionSequence>,
    a_caps: Vec<f64>,
}

fn toy_fixture() -> ToyFixture {
    let model = toy_model(23);
    let embedder = HashEmbedder::new(model.cfg.clip_dim, 17);
    let caps = [
        "a person is walking forward at an easy pace",
        "a person is jumping up and down in place",
    ];
    let h_motions = vec![
        generate_motion(&model.human_skel, "walk", 7, 5, 0).unwrap(),
        generate_motion(&model.human_skel, "jump", 8, 5, 1).unwrap(),
    ];
    let mut h_caps = Vec::new();
    let mut h_caps_swapped = Vec::new();
    for c in caps {
        h_caps.extend(embedder.embed(c).unwrap());
        h_caps_swapped.extend(
            embedder
                .embed(&subject_swap(c, "dog").unwrap())
                .unwrap(),
        );
    }
    let a_motions = vec![generate_motion(&model.animal_skel, "walk", 6, 5, 2).unwrap()];
    let a_caps = embedder
        .embed("a dog is walking forward at an easy pace")
        .unwrap();
    ToyFixture {
        model,
        h_motions,
        h_caps,
        h_caps_swapped,
        a_motions,
        a_caps,
    }
}

/// Audit the composite losses on the toy configuration.
pub fn audit_composite_losses(probes: usize, tolerance: f64) -> Vec<FdReport> {
    let fx = toy_fixture();
    let model = &fx.model;
    let cfg = &model.cfg;
    let h_refs: Vec<&crate::motion::MotionSequence> = fx.h_motions.iter().collect();
    let a_refs: Vec<&crate::motion::MotionSequence> = fx.a_motions.iter().collect();
    let h_batch = MotionBatch::from_motions(&h_refs, &model.human_skel, cfg).unwrap();
    let a_batch = MotionBatch::from_motions(&a_refs, &model.animal_skel, cfg).unwrap();
    let weights = LossWeights::default();
    let mut out = Vec::new();

    type Picker = fn(&crate::motionae::AeLosses) -> TensorId;
    let ae_components: [(&str, Picker); 5] = [
        ("ae.jrec", |l| l.l_jrec),
        ("ae.clip", |l| l.l_clip),
        ("ae.trec", |l| l.l_trec),
        ("ae.trans", |l| l.l_trans),
        ("ae.total", |l| l.total),
    ];
    for (name, pick) in ae_components {
        out.push(fd_check_store(
            &format!("human.{name}"),
            &model.store,
            |g, bind| {
                let l = ae_losses(
                    g, bind, &model.human, cfg, &h_batch, &fx.h_caps, 1.0, 1.0, 1.0,
                )
                .unwrap();
                pick(&l)
            },
            probes,
            tolerance,
            41,
        ));
    }

    type XPicker = fn(&crate::crossdomain::CrossLosses) -> TensorId;
    let cross_components: [(&str, XPicker); 4] = [
        ("cross.clip", |l| l.l_clip_cross),
        ("cross.cons", |l| l.l_cons),
        ("cross.ee", |l| l.l_ee),
        ("cross.total", |l| l.total),
    ];
    for (name, pick) in cross_components {
        out.push(fd_check_store(
            name,
            &model.store,
            |g, bind| {
                let l = cross_losses(
                    g,
                    bind,
                    model,
                    &h_batch,
                    &h_refs,
                    &fx.h_caps_swapped,
                    &weights,
                )
                .unwrap();
                pick(&l)
            },
            probes,
            tolerance,
            43,
        ));
    }

    out.push(fd_check_store(
        "framework.total",
        &model.store,
        |g, bind| {
            total_loss(
                g,
                bind,
                model,
                &h_batch,
                &h_refs,
                &fx.h_caps,
                &fx.h_caps_swapped,
                &a_batch,
                &fx.a_caps,
                &weights,
            )
            .unwrap()
            .total
        },
        probes,
        tolerance,
        47,
    ));
    out
}

/// Per-op finite-difference audit on one representative shape each.
pub fn audit_ops(tolerance: f64) -> Vec<FdReport> {
    let rng = std::cell::RefCell::new(Rng::seed(0xa0d1));
    let vals = |n: usize| -> Vec<f64> {
        let mut r = rng.borrow_mut();
        (0..n).map(|_| r.range(-1.2, 1.2)).collect()
    };
    let safe = |n: usize| -> Vec<f64> {
        let mut r = rng.borrow_mut();
        (0..n)
            .map(|_| {
                let m = r.range(0.4, 1.4);
                if r.below(2) == 0 {
                    m
                } else {
                    -m
                }
            })
            .collect()
    };

    let mut store: ParamStore<f64> = ParamStore::new();
    let reg = |store: &mut ParamStore<f64>, name: &str, shape: &[usize], values: Vec<f64>| {
        let r = store.register(name, shape, crate::tensor::Init::Zeros, 0);
        store.values_mut(r).copy_from_slice(&values);
        r
    };
    let a23 = reg(&mut store, "a23", &[2, 3], vals(6));
    let b23 = reg(&mut store, "b23", &[2, 3], vals(6));
    let m34 = reg(&mut store, "m34", &[3, 4], vals(12));
    let bias4 = reg(&mut store, "bias4", &[4], vals(4));
    let g233 = reg(&mut store, "g233", &[2, 3, 3], vals(18));
    let h234 = reg(&mut store, "h234", &[2, 3, 4], vals(24));
    let q = reg(&mut store, "q", &[2, 4, 4], vals(32));
    let k = reg(&mut store, "k", &[2, 4, 4], vals(32));
    let v = reg(&mut store, "v", &[2, 4, 4], vals(32));
    let gain = reg(&mut store, "gain", &[3], safe(3));
    let lnb = reg(&mut store, "lnb", &[3], vals(3));
    let n3a = reg(&mut store, "n3a", &[3, 3], safe(9));
    let n3b = reg(&mut store, "n3b", &[3, 3], safe(9));
    let m9a = reg(&mut store, "m9a", &[2, 9], vals(18));
    let m9b = reg(&mut store, "m9b", &[2, 9], vals(18));
    let s21 = reg(&mut store, "s21", &[3, 1], vals(3));

    let reduce = |g: &mut Graph<f64>, x: TensorId, seed: u64| -> TensorId {
        let n = g.values(x).len();
        let mut r = Rng::seed(seed);
        let shape = g.shape(x).to_vec();
        let w = g.constant(&shape, (0..n).map(|_| r.range(-1.0, 1.0)).collect());
        let p = g.mul(x, w).unwrap();
        let m = g.mean_all(p);
        g.affine(m, n as f64, 0.0)
    };

    type OpBuild = Box<dyn Fn(&mut Graph<f64>, &Binding) -> TensorId>;
    let wmask = vec![true, false, true, true, false, true];
    let ops: Vec<(&str, OpBuild)> = vec![
        ("add", Box::new(move |g, b| {
            let y = g.add(b.id(a23), b.id(b23)).unwrap();
            reduce(g, y, 1)
        })),
        ("sub", Box::new(move |g, b| {
            let y = g.sub(b.id(a23), b.id(b23)).unwrap();
            reduce(g, y, 2)
        })),
        ("mul", Box::new(move |g, b| {
            let y = g.mul(b.id(a23), b.id(b23)).unwrap();
            reduce(g, y, 3)
        })),
        ("add_broadcast", Box::new(move |g, b| {
            let y = g.add_broadcast(b.id(h234), b.id(bias4)).unwrap();
            reduce(g, y, 4)
        })),
        ("affine", Box::new(move |g, b| {
            let y = g.affine(b.id(a23), -1.3, 0.4);
            reduce(g, y, 5)
        })),
        ("matmul", Box::new(move |g, b| {
            let y = g.matmul(b.id(a23), b.id(m34)).unwrap();
            reduce(g, y, 6)
        })),
        ("batch_matmul", Box::new(move |g, b| {
            let y = g.batch_matmul(b.id(g233), b.id(h234)).unwrap();
            reduce(g, y, 7)
        })),
        ("transpose", Box::new(move |g, b| {
            let y = g.transpose(b.id(a23)).unwrap();
            reduce(g, y, 8)
        })),
        ("reshape", Box::new(move |g, b| {
            let y = g.reshape(b.id(a23), &[3, 2]).unwrap();
            reduce(g, y, 9)
        })),
        ("concat", Box::new(move |g, b| {
            let y = g.concat(&[b.id(a23), b.id(b23)], 1).unwrap();
            reduce(g, y, 10)
        })),
        ("slice", Box::new(move |g, b| {
            let y = g.slice_axis(b.id(h234), 1, 1, 2).unwrap();
            reduce(g, y, 11)
        })),
        ("gather", Box::new(move |g, b| {
            let y = g.gather_mid(b.id(h234), &[2, 0]).unwrap();
            reduce(g, y, 12)
        })),
        ("scatter_zeros", Box::new(move |g, b| {
            let y = g.scatter_mid(b.id(h234), &[4, 1, 0], 5).unwrap();
            reduce(g, y, 13)
        })),
        ("replicate", Box::new(move |g, b| {
            let y = g.replicate_mid(b.id(h234), 2).unwrap();
            reduce(g, y, 14)
        })),
        ("masked_window_mean", Box::new({
            let wmask = wmask.clone();
            move |g, b| {
                let x = g.reshape(b.id(h234), &[2, 3, 4]).unwrap();
                // t=3 not divisible; reshape to [2,2,6] windows of 2 instead
                let x = g.reshape(x, &[2, 2, 6]).unwrap();
                let y = g.masked_window_mean(x, 2, &wmask[..4]).unwrap();
                reduce(g, y, 15)
            }
        })),
        ("mean", Box::new(move |g, b| g.mean_all(b.id(h234)))),
        ("softmax", Box::new(move |g, b| {
            let y = g.softmax(b.id(a23)).unwrap();
            reduce(g, y, 16)
        })),
        ("layer_norm", Box::new(move |g, b| {
            let y = g.layer_norm(b.id(a23), b.id(gain), b.id(lnb)).unwrap();
            reduce(g, y, 17)
        })),
        ("linear", Box::new(move |g, b| {
            let y = g.linear(b.id(a23), b.id(m34), b.id(bias4)).unwrap();
            reduce(g, y, 18)
        })),
        ("multi_head_attention", Box::new(move |g, b| {
            let y = g
                .multi_head_attention(b.id(q), b.id(k), b.id(v), 2, true, None)
                .unwrap();
            reduce(g, y, 19)
        })),
        ("gelu", Box::new(move |g, b| {
            let y = g.gelu(b.id(a23));
            reduce(g, y, 20)
        })),
        ("cosine_similarity", Box::new(move |g, b| {
            let y = g.cosine_rows(b.id(n3a), b.id(n3b)).unwrap();
            reduce(g, y, 21)
        })),
        ("mse", Box::new(move |g, b| g.mse(b.id(a23), b.id(b23)).unwrap())),
        ("masked_mse", Box::new({
            let wmask = wmask.clone();
            move |g, b| g.masked_mse(b.id(a23), b.id(b23), &wmask, 4.0).unwrap()
        })),
        ("l2_norm", Box::new(move |g, b| g.l2_norm(b.id(n3a)))),
        ("normalize3", Box::new(move |g, b| {
            let y = g.normalize3(b.id(n3a)).unwrap();
            reduce(g, y, 22)
        })),
        ("dot3", Box::new(move |g, b| {
            let y = g.dot3(b.id(n3a), b.id(n3b)).unwrap();
            reduce(g, y, 23)
        })),
        ("cross3", Box::new(move |g, b| {
            let y = g.cross3(b.id(n3a), b.id(n3b)).unwrap();
            reduce(g, y, 24)
        })),
        ("mul_broadcast", Box::new(move |g, b| {
            let y = g.mul_bcast_last(b.id(s21), b.id(n3b)).unwrap();
            reduce(g, y, 25)
        })),
        ("mat3_mul", Box::new(move |g, b| {
            let y = g.mat3_mul(b.id(m9a), b.id(m9b)).unwrap();
            reduce(g, y, 26)
        })),
        ("mat3_vec", Box::new(move |g, b| {
            let y = g.mat3_vec_const(b.id(m9a), [0.4, -0.9, 0.7]).unwrap();
            reduce(g, y, 27)
        })),
    ];

    ops.into_iter()
        .map(|(name, build)| {
            fd_check_store(&format!("op.{name}"), &store, build, 14, tolerance, 53)
        })
        .collect()
}

/// Full audit: ops plus composite losses. `probes` bounds the per-loss
/// parameter sample.
pub fn run_audit(probes: usize, tolerance: f64) -> Vec<FdReport> {
    let mut reports = audit_ops(tolerance);
    reports.extend(audit_composite_losses(probes, tolerance));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_skeletons_are_consistent() {
        let h = toy_human();
        let a = toy_animal();
        assert_eq!(h.joint_count(), 5);
        assert_eq!(a.joint_count(), 6);
        let corr = toy_correspondence(&h, &a);
        assert_eq!(corr.len(), 4);
        assert_eq!(h.end_effector_ids.len(), a.end_effector_ids.len());
    }

    #[test]
    fn composite_losses_pass_fd() {
        for r in audit_composite_losses(12, 1e-4) {
            assert!(
                r.pass(),
                "{}: worst rel {} over {} probes",
                r.name,
                r.worst_rel,
                r.checked
            );
        }
    }

    #[test]
    fn op_audit_passes() {
        for r in audit_ops(1e-4) {
            assert!(r.pass(), "{}: worst rel {}", r.name, r.worst_rel);
        }
    }
}
