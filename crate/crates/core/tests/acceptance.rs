//! Acceptance suite: every release criterion as one test, each printing a
//! single PASS/FAIL line. The full-scale check (criterion 8) trains the
//! desk model for 3000 steps and takes tens of minutes on a laptop CPU;
//! everything else is quick.

use omgpt_core::config::RunConfig;
use omgpt_core::crossdomain::{total_loss, JointModel, LossWeights};
use omgpt_core::datagen::{generate_motion, Dataset, DatasetItem};
use omgpt_core::gradcheck::{run_audit, toy_animal, toy_correspondence, toy_human};
use omgpt_core::metrics::{
    diversity, fid, gaussian_stats, mm_dist, mmodality, r_precision, FeatureSet, GaussianStats,
};
use omgpt_core::motion::MotionSequence;
use omgpt_core::motionae::{ModelConfig, MotionBatch};
use omgpt_core::pipeline::{
    evaluate_run, load_data, mean_transfer_consistency, model_from_run_dir, synth, train_run,
    EvalMode,
};
use omgpt_core::rng::Rng;
use omgpt_core::rotmath::{
    axis_angle_matrix, end_effector_velocities, forward_kinematics, matrix_to_rot6d,
    rot6d_to_matrix, Rotation6D,
};
use omgpt_core::skeleton::{build_skeleton, SkeletonGraph, NO_PARENT};
use omgpt_core::tensor::Graph;
use omgpt_core::textembed::{subject_swap, EmbeddingProvider, HashEmbedder, SubjectSwapper};
use omgpt_core::trainer::{TrainConfig, Trainer};
use std::path::PathBuf;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {n:02} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("omgpt_acceptance_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------------------
// 1. Forward kinematics against a homogeneous-transform oracle
// ---------------------------------------------------------------------------

type Mat4 = [[f64; 4]; 4];

fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for r in 0..4 {
        for k in 0..4 {
            let v = a[r][k];
            if v == 0.0 {
                continue;
            }
            for j in 0..4 {
                c[r][j] += v * b[k][j];
            }
        }
    }
    c
}

fn homogeneous(rot: &[[f64; 3]; 3], trans: [f64; 3]) -> Mat4 {
    let mut h = [[0.0; 4]; 4];
    for r in 0..3 {
        for c in 0..3 {
            h[r][c] = rot[r][c];
        }
        h[r][3] = trans[r];
    }
    h[3][3] = 1.0;
    h
}

/// Independent route: for every joint, multiply 4x4 transforms down the
/// path from the root and read the translation column.
fn fk_homogeneous_oracle(m: &MotionSequence, g: &SkeletonGraph) -> Vec<f64> {
    let j = g.joint_count();
    let mut out = vec![0.0; m.frames * j * 3];
    for t in 0..m.frames {
        for joint in 0..j {
            // path root -> joint
            let mut path = vec![joint];
            let mut cur = joint;
            while g.parents[cur] != NO_PARENT {
                cur = g.parents[cur] as usize;
                path.push(cur);
            }
            path.reverse();
            let rv: Vec<f64> = m.rot6(t).iter().map(|&v| v as f64).collect();
            let root_rot = rot6d_to_matrix(&Rotation6D::from_slice(&rv)).unwrap();
            let tr = m.trans(t);
            let mut h = homogeneous(&root_rot, [tr[0] as f64, tr[1] as f64, tr[2] as f64]);
            for &step in &path[1..] {
                let qv: Vec<f64> = m.joint6(t, step, j).iter().map(|&v| v as f64).collect();
                let local = rot6d_to_matrix(&Rotation6D::from_slice(&qv)).unwrap();
                h = mat4_mul(&h, &homogeneous(&local, g.offset_of(step)));
            }
            let base = (t * j + joint) * 3;
            out[base] = h[0][3];
            out[base + 1] = h[1][3];
            out[base + 2] = h[2][3];
        }
    }
    out
}

fn random_skeleton(rng: &mut Rng, max_joints: usize) -> SkeletonGraph {
    let j = 2 + rng.below(max_joints - 1);
    let names = (0..j).map(|i| format!("j{i}")).collect();
    let mut parents = vec![NO_PARENT];
    for i in 1..j {
        parents.push(rng.below(i) as i64);
    }
    let offsets = (0..j - 1)
        .map(|_| {
            [
                rng.range(-0.5, 0.5),
                rng.range(-0.5, 0.5),
                rng.range(-0.5, 0.5),
            ]
        })
        .collect();
    build_skeleton("rand", names, parents, offsets, vec![]).unwrap()
}

fn random_motion(rng: &mut Rng, g: &SkeletonGraph, t: usize) -> MotionSequence {
    let j = g.joint_count();
    fn rot6(rng: &mut Rng, out: &mut Vec<f32>) {
        let axis = [
            rng.range(-1.0, 1.0),
            rng.range(-1.0, 1.0),
            rng.range(-1.0, 1.0) + 1.5,
        ];
        let m = axis_angle_matrix(axis, rng.range(-3.0, 3.0));
        for v in matrix_to_rot6d(&m).unwrap().to_vec() {
            out.push(v as f32);
        }
    }
    let mut global_rotation = Vec::new();
    let mut joint_rotations = Vec::new();
    let mut global_translation = Vec::new();
    for _ in 0..t {
        rot6(rng, &mut global_rotation);
        for _ in 1..j {
            rot6(rng, &mut joint_rotations);
        }
        for _ in 0..3 {
            global_translation.push(rng.range(-2.0, 2.0) as f32);
        }
    }
    MotionSequence {
        skeleton: g.name.clone(),
        frames: t,
        global_rotation,
        global_translation,
        joint_rotations,
        caption: String::new(),
        mask: vec![true; t],
    }
}

#[test]
fn criterion_01_kinematics_oracle() {
    let start = std::time::Instant::now();
    let mut rng = Rng::seed(0xfca1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let g = random_skeleton(&mut rng, 12);
        let t = 2 + rng.below(11);
        let m = random_motion(&mut rng, &g, t);
        let fk = forward_kinematics(&m, &g).unwrap();
        let oracle = fk_homogeneous_oracle(&m, &g);
        for (a, b) in fk.positions.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "kinematics-oracle",
        worst < 1e-10 && secs < 10.0,
        &format!("200 cases, max abs err {worst:.2e}, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. Rotation representation properties
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_rotation_properties() {
    let mut rng = Rng::seed(0x60d2);
    let mut worst_ortho = 0.0f64;
    let mut worst_det = 0.0f64;
    let mut worst_fixed = 0.0f64;
    let mut n = 0;
    while n < 10_000 {
        let r = Rotation6D {
            a1: [
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
            ],
            a2: [
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
            ],
        };
        let Ok(m) = rot6d_to_matrix(&r) else { continue };
        n += 1;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += m[k][i] * m[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                worst_ortho = worst_ortho.max((dot - expect).abs());
            }
        }
        worst_det = worst_det.max((omgpt_core::rotmath::mat3_det(&m) - 1.0).abs());
        // fixed point of the 6D -> matrix -> 6D round trip
        let r1 = matrix_to_rot6d(&m).unwrap();
        let m2 = rot6d_to_matrix(&r1).unwrap();
        let r2 = matrix_to_rot6d(&m2).unwrap();
        for (a, b) in r1.to_vec().iter().zip(r2.to_vec()) {
            worst_fixed = worst_fixed.max((a - b).abs());
        }
    }
    verdict(
        2,
        "rotation-properties",
        worst_ortho < 1e-9 && worst_det < 1e-9 && worst_fixed < 1e-9,
        &format!(
            "1e4 samples, ortho {worst_ortho:.2e}, det {worst_det:.2e}, round trip {worst_fixed:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Differentiation audit
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_differentiation_audit() {
    let start = std::time::Instant::now();
    let reports = run_audit(40, 1e-4);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass())
        .map(|r| format!("{} ({:.2e})", r.name, r.worst_rel))
        .collect();
    verdict(
        3,
        "differentiation-audit",
        failed.is_empty() && secs < 120.0,
        &format!("{} checks, failures [{}], {secs:.1}s", reports.len(), failed.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 4. Latent shape contract at the full-size configuration
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_shape_contract() {
    let cfg = ModelConfig::default();
    let human = omgpt_core::skeleton::smpl22();
    let animal = omgpt_core::skeleton::smal35();
    let corr = omgpt_core::skeleton::smpl_smal_correspondence(&human, &animal);
    let model: JointModel<f64> =
        JointModel::new(cfg.clone(), human.clone(), animal.clone(), corr, 3).unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for (skel, encoder) in [(&human, &model.human), (&animal, &model.animal)] {
        let m = generate_motion(skel, "walk", 30, 5, 0).unwrap();
        let batch = MotionBatch::from_motions(&[&m], skel, &cfg).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let bind = model.store.bind(&mut g);
        let d = batch.constant(&mut g);
        let z = encoder.encode(&mut g, &bind, &cfg, d, &batch.mask).unwrap();
        let shape = g.shape(z).to_vec();
        let want = vec![1, 49, 7 * 16];
        detail.push_str(&format!("{}: {:?} ", skel.name, &shape));
        ok &= shape == want;
    }
    verdict(
        4,
        "shape-contract",
        ok,
        &format!("{detail}(49 slots x 7 joints x 16 channels)"),
    );
}

// ---------------------------------------------------------------------------
// 5. Single-sample overfit
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_overfit_sanity() {
    let start = std::time::Instant::now();
    let h = toy_human();
    let a = toy_animal();
    let corr = toy_correspondence(&h, &a);
    let cfg = ModelConfig::toy();
    let model: JointModel<f32> = JointModel::new(cfg.clone(), h.clone(), a.clone(), corr, 3).unwrap();
    let tc = TrainConfig {
        steps: 2000,
        batch_size: 1,
        lr: 2e-3,
        grad_clip: None,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, tc, LossWeights::default());
    let hm = generate_motion(&h, "walk", 7, 5, 0).unwrap();
    let am = generate_motion(&a, "walk", 6, 5, 0).unwrap();
    let single = |skel: &SkeletonGraph, m: MotionSequence, caption: &str| Dataset {
        skeleton: skel.name.clone(),
        items: vec![DatasetItem {
            captions: std::array::from_fn(|_| caption.to_string()),
            family: "walk".into(),
            motion: m,
        }],
    };
    let hds = single(&h, hm, "a person is walking forward at an easy pace");
    let ads = single(&a, am, "a dog is walking forward at an easy pace");
    let provider = HashEmbedder::new(cfg.clip_dim, 17);
    let swapper = SubjectSwapper::default();
    let animals = vec!["dog".to_string()];
    let mut first = None;
    let mut last = None;
    for _ in 0..2000 {
        let row = trainer
            .train_step(&hds, &ads, &animals, &provider, &swapper)
            .unwrap();
        if first.is_none() {
            first = Some(row);
        }
        last = Some(row);
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    let jrec_ratio = (last.jrec_h / first.jrec_h).max(last.jrec_a / first.jrec_a);
    let trec_ratio = (last.trec_h / first.trec_h).max(last.trec_a / first.trec_a);
    // decoded motion against its input, real frames only
    let batch = MotionBatch::from_motions(&[&hds.items[0].motion], &h, &cfg).unwrap();
    let mut g: Graph<f32> = Graph::new();
    let bind = trainer.model.store.bind(&mut g);
    let d = batch.constant(&mut g);
    let z = trainer
        .model
        .human
        .encode(&mut g, &bind, &cfg, d, &batch.mask)
        .unwrap();
    let out = trainer.model.human.decode(&mut g, &bind, &cfg, z).unwrap();
    let rec = g.values(out);
    let mut max_err = 0.0f64;
    for (i, &mk) in batch.elem_mask().iter().enumerate() {
        if mk {
            max_err = max_err.max((rec[i] as f64 - batch.dynamic[i]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "overfit-sanity",
        jrec_ratio < 0.01 && trec_ratio < 0.01 && max_err < 1e-2 && secs < 300.0,
        &format!(
            "jrec ratio {jrec_ratio:.4}, trec ratio {trec_ratio:.4}, max elem err {max_err:.4}, {secs:.0}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Metric oracles
// ---------------------------------------------------------------------------

fn mat_inv(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        for j in 0..n {
            a.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let p = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                for j in 0..n {
                    a[r * n + j] -= f * a[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    inv
}

fn mat_mul_dense(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let v = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += v * b[k * n + j];
            }
        }
    }
    c
}

fn sqrtm_denman_beavers(m: &[f64], n: usize) -> Vec<f64> {
    let mut y = m.to_vec();
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    for _ in 0..200 {
        let zi = mat_inv(&z, n);
        let yi = mat_inv(&y, n);
        let mut delta = 0.0;
        for i in 0..n * n {
            let y2 = 0.5 * (y[i] + zi[i]);
            delta += (y2 - y[i]).abs();
            y[i] = y2;
            z[i] = 0.5 * (z[i] + yi[i]);
        }
        if delta < 1e-14 {
            break;
        }
    }
    y
}

#[test]
fn criterion_06_metric_oracles() {
    let mut rng = Rng::seed(0x3e7);
    let rand_fs = |rng: &mut Rng, dim: usize, n: usize| {
        FeatureSet::new(dim, (0..dim * n).map(|_| rng.range(-1.0, 1.0)).collect())
    };
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, err: f64, tol: f64| {
        if !(err <= tol) {
            failures.push(format!("{name} err {err:.2e}"));
        }
    };
    // fid closed forms
    let a = gaussian_stats(&rand_fs(&mut rng, 6, 40)).unwrap();
    check("fid-identical", fid(&a, &a).unwrap().abs(), 1e-8);
    let g0 = GaussianStats {
        dim: 1,
        mean: vec![0.0],
        cov: vec![1.0],
    };
    let g1 = GaussianStats {
        dim: 1,
        mean: vec![1.0],
        cov: vec![1.0],
    };
    check("fid-1d", (fid(&g0, &g1).unwrap() - 1.0).abs(), 1e-8);
    // fid against the Denman-Beavers route on 8-D stats
    let sa = gaussian_stats(&rand_fs(&mut rng, 8, 50)).unwrap();
    let sb = gaussian_stats(&rand_fs(&mut rng, 8, 45)).unwrap();
    let prod = mat_mul_dense(&sa.cov, &sb.cov, 8);
    let sq = sqrtm_denman_beavers(&prod, 8);
    let tr_cross: f64 = (0..8).map(|i| sq[i * 8 + i]).sum();
    let mean_term: f64 = sa
        .mean
        .iter()
        .zip(&sb.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr: f64 = (0..8).map(|i| sa.cov[i * 8 + i] + sb.cov[i * 8 + i]).sum();
    let oracle = mean_term + tr - 2.0 * tr_cross;
    check("fid-8d-oracle", (fid(&sa, &sb).unwrap() - oracle).abs(), 1e-8);
    // mm_dist naive loop
    let p = rand_fs(&mut rng, 7, 64);
    let t = rand_fs(&mut rng, 7, 64);
    let naive: f64 = (0..64)
        .map(|i| {
            p.row(i)
                .iter()
                .zip(t.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / 64.0;
    check("mm-dist", (mm_dist(&p, &t).unwrap() - naive).abs(), 1e-8);
    // diversity naive with the same seed
    let mut idx: Vec<usize> = (0..64).collect();
    Rng::keyed(9, &[0xd17e]).shuffle(&mut idx);
    let naive_div: f64 = (0..16)
        .map(|i| {
            p.row(idx[i])
                .iter()
                .zip(p.row(idx[16 + i]))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / 16.0;
    check(
        "diversity",
        (diversity(&p, 16, 9).unwrap() - naive_div).abs(),
        1e-8,
    );
    // mmodality hand case: one caption, subset 1, two points 5 apart
    let one = vec![FeatureSet::new(2, vec![0.0, 0.0, 3.0, 4.0])];
    check("mmodality", (mmodality(&one, 1, 4).unwrap() - 5.0).abs(), 1e-8);
    // r-precision on identical sets
    let tops = r_precision(&t, &t, 8, 3, 2).unwrap();
    check("r-precision-perfect", (tops[0] - 1.0).abs(), 1e-12);
    verdict(
        6,
        "metric-oracles",
        failures.is_empty(),
        &format!("failures: [{}]", failures.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 7. Retrieval chance calibration
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_chance_calibration() {
    let mut rng = Rng::seed(0xca11);
    let n = 1024;
    let dim = 8;
    let pred = FeatureSet::new(dim, (0..n * dim).map(|_| rng.range(-1.0, 1.0)).collect());
    let text = FeatureSet::new(dim, (0..n * dim).map(|_| rng.range(-1.0, 1.0)).collect());
    let tops = r_precision(&pred, &text, 32, 1, 7).unwrap();
    let p = 1.0 / 32.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let dev = (tops[0] - p).abs();
    verdict(
        7,
        "chance-calibration",
        dev <= 3.0 * sigma,
        &format!("top1 {:.4} vs 1/32 = {p:.4}, {:.1} sigma", tops[0], dev / sigma),
    );
}

// ---------------------------------------------------------------------------
// 8. End-to-end learning signal (the long run)
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_end_to_end_learning() {
    let dir = work_dir("e2e");
    let cfg = RunConfig::default();
    let data_dir = dir.join("data");
    synth(&cfg, &data_dir).unwrap();
    // untrained baseline for the latent-consistency comparison
    let data = load_data(&data_dir).unwrap();
    let untrained: JointModel<f32> = JointModel::new(
        cfg.model.clone(),
        data.human_skel.clone(),
        data.animal_skel.clone(),
        data.correspondence.clone(),
        cfg.train.seed,
    )
    .unwrap();
    let provider = HashEmbedder::new(cfg.model.clip_dim, cfg.embed.seed);
    let swapper = SubjectSwapper::default();
    let cons_untrained = mean_transfer_consistency(
        &untrained,
        &cfg,
        &data.human_test.items,
        &provider,
        &swapper,
        24,
        5,
    )
    .unwrap();
    drop(untrained);
    // the desk-scale training run
    let run_dir = dir.join("run");
    train_run(&cfg, &data_dir, &run_dir, None).unwrap();
    let (_, trained) = model_from_run_dir(&run_dir, Some(false)).unwrap();
    let cons_trained = mean_transfer_consistency(
        &trained,
        &cfg,
        &data.human_test.items,
        &provider,
        &swapper,
        24,
        5,
    )
    .unwrap();
    drop(trained);
    let id = evaluate_run(
        &run_dir,
        &data_dir,
        EvalMode::InDistribution,
        &dir.join("report_id.json"),
        None,
    )
    .unwrap();
    let ood = evaluate_run(
        &run_dir,
        &data_dir,
        EvalMode::OutOfDistribution,
        &dir.join("report_ood.json"),
        None,
    )
    .unwrap();
    let id_top1 = id.metrics["r_precision_top1"].mean;
    let ood_top1 = ood.metrics["r_precision_top1"].mean;
    let chance = 1.0 / 32.0;
    let cons_ratio = cons_trained / cons_untrained;
    verdict(
        8,
        "end-to-end-learning",
        id_top1 > 3.0 * chance && ood_top1 > 2.0 * chance && cons_ratio < 0.25,
        &format!(
            "id top1 {id_top1:.4} (need > {:.4}), ood top1 {ood_top1:.4} (need > {:.4}), \
             consistency ratio {cons_ratio:.4} (need < 0.25)",
            3.0 * chance,
            2.0 * chance
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Byte-level determinism of the whole pipeline
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_determinism() {
    let cfg = RunConfig::parse(
        "[data]\nhuman_samples_per_family = 6\nanimal_samples_per_family = 6\n\
         families = walk,jump,sit\n\
         [train]\nsteps = 60\nbatch_size = 4\ncheckpoint_interval = 50\n\
         [eval]\nruns = 3\nsamples = 12\ndiversity_pairs = 4\npool_size = 8\n\
         mm_captions = 2\nmm_generations = 4\nmm_subset = 2\n",
    )
    .unwrap();
    let run_once = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let dir = work_dir(tag);
        let data_dir = dir.join("data");
        synth(&cfg, &data_dir).unwrap();
        let run_dir = dir.join("run");
        train_run(&cfg, &data_dir, &run_dir, None).unwrap();
        let report = dir.join("report.json");
        evaluate_run(&run_dir, &data_dir, EvalMode::InDistribution, &report, None).unwrap();
        (
            std::fs::read(run_dir.join("ckpt_final.omgt")).unwrap(),
            std::fs::read(run_dir.join("loss_history.csv")).unwrap(),
            std::fs::read(report).unwrap(),
        )
    };
    let (ck1, h1, r1) = run_once("det_a");
    let (ck2, h2, r2) = run_once("det_b");
    verdict(
        9,
        "determinism",
        ck1 == ck2 && h1 == h2 && r1 == r2,
        &format!(
            "checkpoint {} bytes, history {} bytes, report {} bytes, all byte-identical: {}",
            ck1.len(),
            h1.len(),
            r1.len(),
            ck1 == ck2 && h1 == h2 && r1 == r2
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Masking: padding frames change nothing
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_masking() {
    let cfg = ModelConfig::desk();
    let human = omgpt_core::skeleton::smpl22();
    let animal = omgpt_core::skeleton::smal35();
    let corr = omgpt_core::skeleton::smpl_smal_correspondence(&human, &animal);
    let model: JointModel<f64> =
        JointModel::new(cfg.clone(), human.clone(), animal.clone(), corr, 11).unwrap();
    let provider = HashEmbedder::new(cfg.clip_dim, 17);
    let hm = generate_motion(&human, "run", 20, 3, 0).unwrap();
    let am = generate_motion(&animal, "walk", 14, 3, 1).unwrap();
    let h_cap = provider.embed("a person is running forward quickly").unwrap();
    let h_sw = provider
        .embed(&subject_swap("a person is running forward quickly", "dog").unwrap())
        .unwrap();
    let a_cap = provider
        .embed("a dog is walking forward at an easy pace")
        .unwrap();
    let eval = |hm: &MotionSequence, am: &MotionSequence| -> Vec<f64> {
        let h_batch = MotionBatch::from_motions(&[hm], &human, &cfg).unwrap();
        let a_batch = MotionBatch::from_motions(&[am], &animal, &cfg).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let bind = model.store.bind(&mut g);
        let all = total_loss(
            &mut g,
            &bind,
            &model,
            &h_batch,
            &[hm],
            &h_cap,
            &h_sw,
            &a_batch,
            &a_cap,
            &LossWeights::default(),
        )
        .unwrap();
        vec![
            g.scalar(all.human.l_jrec),
            g.scalar(all.human.l_clip),
            g.scalar(all.human.l_trec),
            g.scalar(all.human.l_trans),
            g.scalar(all.animal.l_jrec),
            g.scalar(all.animal.l_clip),
            g.scalar(all.animal.l_trec),
            g.scalar(all.animal.l_trans),
            g.scalar(all.cross.l_cons),
            g.scalar(all.cross.l_clip_cross),
            g.scalar(all.cross.l_ee),
            g.scalar(all.total),
        ]
    };
    let base = eval(&hm, &am);
    let hm_pad = hm.with_extra_padding(3, human.joint_count());
    let am_pad = am.with_extra_padding(2, animal.joint_count());
    let padded = eval(&hm_pad, &am_pad);
    let worst = base
        .iter()
        .zip(&padded)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    verdict(
        10,
        "masking",
        worst <= 1e-9,
        &format!("12 loss components, max change {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 11. Resume equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_resume_equivalence() {
    let h = toy_human();
    let a = toy_animal();
    let corr = toy_correspondence(&h, &a);
    let cfg = ModelConfig::toy();
    let make_trainer = || -> Trainer<f32> {
        let model = JointModel::new(cfg.clone(), h.clone(), a.clone(), corr.clone(), 13).unwrap();
        Trainer::new(
            model,
            TrainConfig {
                steps: 150,
                batch_size: 2,
                seed: 13,
                ..TrainConfig::default()
            },
            LossWeights::default(),
        )
    };
    let hspec = omgpt_core::datagen::DatasetSpec {
        seed: 3,
        skeleton: h.name.clone(),
        subject: omgpt_core::datagen::SubjectKind::Human,
        families: vec!["walk".into(), "jump".into()],
        samples_per_family: 3,
        frames_min: 5,
        frames_max: 8,
        train_fraction: 1.0,
    };
    let aspec = omgpt_core::datagen::DatasetSpec {
        seed: 4,
        skeleton: a.name.clone(),
        subject: omgpt_core::datagen::SubjectKind::Animal(vec!["dog".into()]),
        families: vec!["walk".into(), "jump".into()],
        samples_per_family: 3,
        frames_min: 5,
        frames_max: 8,
        train_fraction: 1.0,
    };
    let hds = omgpt_core::datagen::generate(&hspec, &h).unwrap();
    let ads = omgpt_core::datagen::generate(&aspec, &a).unwrap();
    let provider = HashEmbedder::new(cfg.clip_dim, 17);
    let swapper = SubjectSwapper::default();
    let animals = vec!["dog".to_string()];
    let run = |t: &mut Trainer<f32>, n: u64| {
        for _ in 0..n {
            t.train_step(&hds, &ads, &animals, &provider, &swapper)
                .unwrap();
        }
    };
    let dir = work_dir("resume");
    let ckpt = dir.join("mid.omgt");
    let mut straight = make_trainer();
    run(&mut straight, 150);
    let mut part1 = make_trainer();
    run(&mut part1, 100);
    part1.save(&ckpt).unwrap();
    let mut resumed = make_trainer();
    resumed.load(&ckpt).unwrap();
    run(&mut resumed, 50);
    let mut equal = straight.step == resumed.step;
    for (x, y) in straight
        .model
        .store
        .entries
        .iter()
        .zip(&resumed.model.store.entries)
    {
        equal &= x.values == y.values;
    }
    for (x, y) in straight.ema.shadow.iter().zip(&resumed.ema.shadow) {
        equal &= x == y;
    }
    for (x, y) in straight.adam.m.iter().zip(&resumed.adam.m) {
        equal &= x == y;
    }
    verdict(
        11,
        "resume-equivalence",
        equal,
        "150 straight steps vs 100 + checkpoint + 50, parameters/moments/shadows bit-identical",
    );
}

// ---------------------------------------------------------------------------
// 12. Evaluation protocol shape
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_evaluation_protocol() {
    let dir = work_dir("protocol");
    let cfg = RunConfig::parse(
        "[data]\nhuman_samples_per_family = 6\nanimal_samples_per_family = 6\n\
         families = walk,run,sit\n\
         [train]\nsteps = 40\nbatch_size = 4\ncheckpoint_interval = 0\n\
         [eval]\nruns = 20\nsamples = 16\ndiversity_pairs = 6\npool_size = 8\n\
         mm_captions = 2\nmm_generations = 4\nmm_subset = 2\n",
    )
    .unwrap();
    let data_dir = dir.join("data");
    synth(&cfg, &data_dir).unwrap();
    let run_dir = dir.join("run");
    train_run(&cfg, &data_dir, &run_dir, None).unwrap();
    let report_path = dir.join("report.json");
    let report = evaluate_run(
        &run_dir,
        &data_dir,
        EvalMode::InDistribution,
        &report_path,
        None,
    )
    .unwrap();
    let mut ok = report.runs == 20;
    let expected = [
        "fid",
        "mm_dist",
        "diversity",
        "mmodality",
        "r_precision_top1",
        "r_precision_top2",
        "r_precision_top3",
    ];
    for name in expected {
        match report.metrics.get(name) {
            Some(stat) => {
                ok &= stat.values.len() == 20 && stat.mean.is_finite() && stat.std.is_finite()
            }
            None => ok = false,
        }
    }
    // the written file parses back to the same report
    let text = std::fs::read_to_string(&report_path).unwrap();
    let parsed: omgpt_core::metrics::MetricReport = serde_json::from_str(&text).unwrap();
    ok &= parsed == report;
    verdict(
        12,
        "evaluation-protocol",
        ok,
        &format!(
            "{} metrics, {} runs each, mean/std recorded",
            report.metrics.len(),
            report.runs
        ),
    );
}

// ---------------------------------------------------------------------------
// Supplementary invariants exercised at acceptance level
// ---------------------------------------------------------------------------

#[test]
fn velocity_masking_and_ee_counts() {
    // both bundled templates expose five end effectors and the velocity
    // layout matches between the kinematics module and the loss path
    let human = omgpt_core::skeleton::smpl22();
    let animal = omgpt_core::skeleton::smal35();
    assert_eq!(human.end_effector_ids.len(), 5);
    assert_eq!(animal.end_effector_ids.len(), 5);
    let m = generate_motion(&human, "walk", 12, 3, 0).unwrap();
    let v = end_effector_velocities(&m, &human).unwrap();
    assert_eq!(v.effectors, 5);
    assert_eq!(v.frames, 11);
}
