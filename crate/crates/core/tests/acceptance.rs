//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use paq_core::assignment::{
    adaptive_k, one_to_many_loss, quality_aware_assign, quality_score, QualityScoreTable, VarifocalParams,
};
use paq_core::diffcore::{finite_diff_check, Bound, Tape, Tensor, Var};
use paq_core::geometry::{bbox_from_row, Bbox};
use paq_core::harness::{self, epochs_to_threshold, oracle, ExperimentSpec, PointStatus, RunOptions};
use paq_core::matching::{one_to_one_loss, GroundTruth, LossWeights, Matching};
use paq_core::patterns::{compose_queries, diversity_loss, WeightGenerator};
use paq_core::toymodel::{
    plan_supervision, render_scene, total_loss, total_loss_with_plan, AssignmentMode, DetectorModel, ModelConfig,
    QueryMode, RunRecord, SceneParams, TrainConfig, Trainer,
};
use paq_core::diffcore::ParamStore;
use paq_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1, 2

fn oracle_matching() -> Result<Verdict> {
    let r = oracle::hungarian_sweep(1000, 2024)?;
    Ok(verdict(
        r.passed() && r.checked == 1000 && r.elapsed < Duration::from_secs(10),
        format!("{} instances, {} mismatches, {:.2}s", r.checked, r.mismatches, r.elapsed.as_secs_f64()),
    ))
}

fn table(col: &[f64]) -> QualityScoreTable {
    QualityScoreTable::from_scores(col.len(), 1, 0.4, col.to_vec()).unwrap()
}

fn oracle_assignment() -> Result<Verdict> {
    let r = oracle::select_positives_sweep(1000, 2025)?;
    let hand = [
        (adaptive_k(&table(&[0.4, 0.9, 0.1, 0.6, 0.8]), 4, 1), 3),
        (adaptive_k(&table(&[-0.2, -0.05, -0.4, -0.1]), 4, 1), 1),
        (adaptive_k(&table(&[1.0, 1.0, 1.0, 1.0, 0.3]), 4, 1), 4),
    ];
    let hand_ok = hand.iter().all(|(got, want)| got == &vec![*want]);
    let got: Vec<usize> = hand.iter().map(|h| h.0[0]).collect();
    Ok(verdict(
        r.passed() && hand_ok,
        format!("{} tables, {} mismatches; adaptive_k examples {got:?} (expected [3, 1, 4])", r.checked, r.mismatches),
    ))
}

// ---------------------------------------------------------------- 3

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn contract<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let w: Vec<f64> = (0..y.numel()).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    Ok(y.mul_const(&w)?.sum_all())
}

type Op = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>>;

fn op_cases() -> Vec<(&'static str, Vec<usize>, Op)> {
    vec![
        ("matmul", vec![3, 4], |t, x| {
            let b = t.constant(&[4, 2], vec![0.3, -1.0, 0.7, 0.2, -0.5, 1.1, 0.9, -0.4])?;
            contract(x.matmul(b)?)
        }),
        ("transpose", vec![3, 4], |_, x| contract(x.transpose()?)),
        ("add", vec![3, 4], |_, x| contract(x.add(x.sigmoid())?)),
        ("sub", vec![3, 4], |_, x| contract(x.sub(x.exp())?)),
        ("mul", vec![3, 4], |_, x| contract(x.mul(x.sigmoid())?)),
        ("add_row", vec![3, 4], |t, x| contract(x.add_row(t.constant(&[4], vec![0.1, 0.2, -0.3, 0.4])?)?)),
        ("mul_row", vec![3, 4], |t, x| contract(x.mul_row(t.constant(&[4], vec![0.5, -2.0, 1.3, 0.4])?)?)),
        ("mul_col", vec![3, 4], |t, x| contract(x.mul_col(t.constant(&[3], vec![0.5, -2.0, 1.3])?)?)),
        ("scale", vec![3, 4], |_, x| contract(x.scale(-1.7))),
        ("affine", vec![3, 4], |_, x| contract(x.affine(0.3, 2.0))),
        ("relu", vec![3, 4], |_, x| contract(x.relu())),
        ("sigmoid", vec![3, 4], |_, x| contract(x.sigmoid())),
        ("abs", vec![3, 4], |_, x| contract(x.abs())),
        ("exp", vec![3, 4], |_, x| contract(x.exp())),
        ("ln", vec![3, 4], |_, x| contract(x.abs().affine(1.0, 0.5).ln())),
        ("log1m_exp", vec![3, 4], |_, x| contract(x.abs().affine(-1.0, -0.05).log1m_exp())),
        ("powf", vec![3, 4], |_, x| contract(x.abs().affine(1.0, 0.1).powf(2.0))),
        ("sum_all", vec![3, 4], |_, x| Ok(x.mul(x)?.sum_all())),
        ("mean_all", vec![3, 4], |_, x| Ok(x.mul(x)?.mean_all())),
        ("sum_rows", vec![3, 4], |_, x| contract(x.sum_rows())),
        ("mean_axis0", vec![3, 4], |_, x| contract(x.mean_axis0())),
        ("softmax_rows", vec![3, 4], |_, x| contract(x.softmax_rows())),
        ("log_softmax_rows", vec![3, 4], |_, x| contract(x.log_softmax_rows())),
        ("layer_norm_rows", vec![3, 4], |_, x| contract(x.layer_norm_rows(1e-5))),
        ("l2_normalize_rows", vec![3, 4], |_, x| contract(x.l2_normalize_rows())),
        ("cosine_rows", vec![3, 4], |_, x| contract(x.cosine_rows(x.exp())?)),
        ("cosine_matrix", vec![3, 4], |_, x| contract(x.cosine_matrix()?)),
        ("reshape", vec![3, 4], |_, x| contract(x.reshape(&[2, 6])?)),
        ("nearest_upsample2x", vec![2, 3, 2], |_, x| contract(x.nearest_upsample2x()?)),
        ("dilated_stencil", vec![5, 6, 2], |t, x| {
            let w: Vec<f64> = (0..18).map(|i| 0.1 * (i as f64) - 0.8).collect();
            contract(x.dilated_stencil(t.constant(&[9, 2], w)?, 2)?)
        }),
        ("gather_rows", vec![3, 4], |_, x| contract(x.gather_rows(&[2, 0, 2])?)),
        ("pick", vec![3, 4], |_, x| contract(x.pick(&[(0, 1), (2, 3), (0, 1)])?)),
        ("compose_queries", vec![3, 4], |t, p| {
            let w = t.constant(&[2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3])?;
            contract(compose_queries(p, w)?)
        }),
        ("diversity_loss", vec![3, 4], |_, p| diversity_loss(p)),
    ]
}

fn box_fixture() -> (Tensor, Vec<[f64; 4]>, Vec<[f64; 4]>) {
    let preds = Tensor::new(
        &[3, 4],
        vec![0.4, 0.49, 0.3, 0.2, 0.52, 0.47, 0.26, 0.33, 0.2, 0.8, 0.1, 0.15],
    )
    .unwrap();
    let corners = vec![[0.3, 0.35, 0.6, 0.6], [0.41, 0.28, 0.66, 0.62], [0.6, 0.1, 0.9, 0.3]];
    let centres = corners
        .iter()
        .map(|c| [(c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0, c[2] - c[0], c[3] - c[1]])
        .collect();
    (preds, corners, centres)
}

fn loss_fixture() -> (Tensor, Tensor, Vec<GroundTruth>) {
    let logits = Tensor::new(
        &[4, 3],
        vec![0.3, -0.2, 0.1, 1.2, 0.4, -0.7, -0.5, 0.9, 0.2, 0.05, 0.1, 0.6],
    )
    .unwrap();
    let boxes = Tensor::new(
        &[4, 4],
        vec![
            0.48, 0.46, 0.22, 0.29, 0.45, 0.5, 0.31, 0.2, 0.35, 0.3, 0.16, 0.23, 0.7, 0.7, 0.1, 0.12,
        ],
    )
    .unwrap();
    let gts = vec![
        GroundTruth {
            bbox: Bbox::new(0.5, 0.45, 0.2, 0.25).unwrap(),
            class: 0,
        },
        GroundTruth {
            bbox: Bbox::new(0.33, 0.28, 0.17, 0.2).unwrap(),
            class: 1,
        },
    ];
    (logits, boxes, gts)
}

fn unflatten<'t>(model: &DetectorModel, flat: Var<'t>) -> Result<Bound<'t>> {
    let col = flat.reshape(&[flat.numel(), 1])?;
    let mut off = 0;
    let mut vars = Vec::new();
    for (_, t) in model.store.iter() {
        let idx: Vec<usize> = (off..off + t.numel()).collect();
        vars.push(col.gather_rows(&idx)?.reshape(t.shape())?);
        off += t.numel();
    }
    Ok(Bound::from_vars(vars))
}

fn small_config(mode: QueryMode, assignment: AssignmentMode) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            n: 6,
            m: 3,
            d: 8,
            layers: 2,
            num_classes: 3,
            mode,
            scale_extents: vec![4, 8],
        },
        scene: SceneParams {
            d: 8,
            num_classes: 3,
            min_objects: 2,
            max_objects: 2,
            ..SceneParams::default()
        },
        assignment,
        k: 2,
        ..TrainConfig::default()
    }
}

fn gradient_suite() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (name, shape, f) in op_cases() {
        let mut err = 0.0_f64;
        for _ in 0..3 {
            let mut theta = rand_tensor(&shape, &mut rng, -2.0, 2.0);
            for v in theta.data_mut() {
                if v.abs() < 1e-2 {
                    *v += 0.05;
                }
            }
            err = err.max(finite_diff_check(f, &theta, EPS)?);
        }
        worst.push((name.to_string(), err));
    }

    let (preds, corners, centres) = box_fixture();
    worst.push(("giou_loss_rows".into(), finite_diff_check(|_, x| contract(x.giou_loss_rows(&corners)?), &preds, EPS)?));
    worst.push(("l1_rows".into(), finite_diff_check(|_, x| contract(x.l1_rows(&centres)?), &preds, EPS)?));

    let (logits, boxes, gts) = loss_fixture();
    let w = LossWeights::default();
    let m = Matching { pairs: vec![(0, 0), (2, 1)] };
    worst.push((
        "one_to_one_loss".into(),
        finite_diff_check(|t, x| Ok(one_to_one_loss(&m, x, t.leaf(&boxes), &gts, w, 0.1)?.total), &logits, EPS)?
            .max(finite_diff_check(|t, x| Ok(one_to_one_loss(&m, t.leaf(&logits), x, &gts, w, 0.1)?.total), &boxes, EPS)?),
    ));
    let probs = {
        let tape = Tape::new();
        tape.leaf(&logits).softmax_rows().value().to_vec()
    };
    let scored: Vec<(Bbox, f64)> = (0..4)
        .map(|i| (bbox_from_row(boxes.data(), i), probs[i * 3..i * 3 + 2].iter().copied().fold(0.0, f64::max)))
        .collect();
    let gt_boxes: Vec<Bbox> = gts.iter().map(|g| g.bbox).collect();
    let a = quality_aware_assign(&quality_score(&scored, &gt_boxes, 0.4)?, 4, 1)?;
    let vfl = VarifocalParams::default();
    worst.push((
        "one_to_many_loss".into(),
        finite_diff_check(|t, x| Ok(one_to_many_loss(&a, x, t.leaf(&boxes), &gts, w, vfl)?.total), &logits, EPS)?.max(
            finite_diff_check(
                |t, x| {
                    let parts = one_to_many_loss(&a, t.leaf(&logits), x, &gts, w, vfl)?;
                    Ok(parts.total.affine(1.0, -parts.cls))
                },
                &boxes,
                EPS,
            )?,
        ),
    ));

    // weight generator, with respect to its input maps
    let mut store = ParamStore::new();
    let gen = WeightGenerator::init_with_extents(&mut store, &mut rng, &[5, 10], 4, 3, 3, 3);
    let jitter: Vec<f64> = store.flatten().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
    store.load_flat(&jitter)?;
    let coarse = rand_tensor(&[5, 5, 3], &mut rng, -1.0, 1.0);
    let fine = rand_tensor(&[10, 10, 3], &mut rng, -1.0, 1.0);
    worst.push((
        "generate_weights".into(),
        finite_diff_check(
            |t, x| {
                let b = store.bind(t);
                contract(gen.generate_weights(&b, &[x, t.leaf(&fine)])?)
            },
            &coarse,
            EPS,
        )?,
    ));

    // full objective on a seeded 2-object scene, both query modes; the
    // matching and positive sets are frozen at the unperturbed parameters
    for (label, mode, asg) in [
        ("full objective (dynamic, quality-aware)", QueryMode::Dynamic, AssignmentMode::QualityAware),
        ("full objective (static, one-to-one)", QueryMode::Static, AssignmentMode::OneToOne),
    ] {
        let cfg = small_config(mode, asg);
        let mut model = cfg.init_model()?;
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let flat: Vec<f64> = model.store.flatten().into_iter().map(|v| v + r.gen_range(-0.2..0.2)).collect();
        model.store.load_flat(&flat)?;
        let scene = render_scene(11, &cfg.scene)?;
        assert_eq!(scene.gts.len(), 2);
        let tape = Tape::new();
        let decoded = model.decode(&model.store.bind(&tape), &scene)?;
        let plan = plan_supervision(&decoded.layers, &scene.gts, &cfg)?;
        let theta = Tensor::new(&[model.num_params()], model.store.flatten())?;
        let err = finite_diff_check(
            |_, x| {
                let bound = unflatten(&model, x)?;
                let decoded = model.decode(&bound, &scene)?;
                Ok(total_loss_with_plan(&decoded, &scene.gts, &plan, &cfg)?.0)
            },
            &theta,
            EPS,
        )?;
        worst.push((label.into(), err));
    }

    let elapsed = start.elapsed();
    let failing: Vec<&(String, f64)> = worst.iter().filter(|(_, e)| !(*e < GRAD_TOL)).collect();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(verdict(
        failing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, max rel. error {max:.2e}, failing {failing:?}, {:.1}s",
            worst.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn convexity() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut rows = 0;
    let mut worst_sum = 0.0_f64;
    let mut hull_ok = true;
    while rows < 10_000 {
        let (n, m, d) = (50, rng.gen_range(2..12), 6);
        let tape = Tape::new();
        let logits = tape.leaf(&rand_tensor(&[n, m], &mut rng, -6.0, 6.0));
        let w = logits.softmax_rows();
        let wv = w.value();
        for r in 0..n {
            let s: f64 = wv[r * m..(r + 1) * m].iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        let p = tape.leaf(&rand_tensor(&[m, d], &mut rng, -2.0, 2.0));
        let q = compose_queries(p, w)?.value();
        let pv = p.value();
        for c in 0..d {
            let lo = (0..m).map(|j| pv[j * d + c]).fold(f64::INFINITY, f64::min);
            let hi = (0..m).map(|j| pv[j * d + c]).fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            for i in 0..n {
                let v = q[i * d + c];
                hull_ok &= v >= lo - slack && v <= hi + slack;
            }
        }
        rows += n;
    }

    let tape = Tape::new();
    let mut div_range_ok = true;
    for _ in 0..200 {
        let m = rng.gen_range(2..8);
        let p = tape.leaf(&rand_tensor(&[m, 5], &mut rng, -1.0, 1.0));
        let v = diversity_loss(p)?.item();
        div_range_ok &= (0.0..=1.0).contains(&v);
    }
    let orth = tape.leaf(&Tensor::new(&[3, 3], vec![2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 7.0])?);
    let same = tape.leaf(&Tensor::new(&[3, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8])?);
    let (d0, d1) = (diversity_loss(orth)?.item(), diversity_loss(same)?.item());

    Ok(verdict(
        worst_sum <= 1e-9 && hull_ok && div_range_ok && d0 == 0.0 && d1 == 1.0,
        format!(
            "{rows} rows, max |Σw - 1| = {worst_sum:.1e}, hull {}, diversity in [0,1] {div_range_ok}, orthogonal {d0}, identical {d1}",
            if hull_ok { "ok" } else { "violated" }
        ),
    ))
}

// ---------------------------------------------------------------- 5, 6, 7

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Ablation {
    /// (dynamic, quality-aware) → seed → record
    runs: BTreeMap<(bool, bool), BTreeMap<u64, RunRecord>>,
    root: std::path::PathBuf,
    elapsed: Duration,
    failures: Vec<String>,
}

fn run_ablation(dir: &Path) -> Result<Ablation> {
    let spec: ExperimentSpec = harness::preset("ablation", SEEDS.to_vec())?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let start = Instant::now();
    let root = dir.join("ablation");
    let results = harness::run(&spec, &root, RunOptions { resume: false, threads })?;
    let elapsed = start.elapsed();
    let mut runs: BTreeMap<(bool, bool), BTreeMap<u64, RunRecord>> = BTreeMap::new();
    let mut failures = Vec::new();
    for r in results {
        if r.status != PointStatus::Completed {
            failures.push(format!("{}: {:?}", r.id, r.status));
        }
        if let Some(rec) = r.record {
            let key = (rec.config.model.mode == QueryMode::Dynamic, rec.config.assignment == AssignmentMode::QualityAware);
            runs.entry(key).or_default().insert(rec.config.seed, rec);
        }
    }
    Ok(Ablation {
        runs,
        root,
        elapsed,
        failures,
    })
}

fn pairs(ab: &Ablation, cfg: (bool, bool)) -> Vec<(&RunRecord, &RunRecord)> {
    let base = &ab.runs[&(false, false)];
    let other = &ab.runs[&cfg];
    SEEDS.iter().filter_map(|s| Some((base.get(s)?, other.get(s)?))).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn gini_direction(ab: &Ablation) -> Verdict {
    let p = pairs(ab, (true, true));
    let g_base = mean(p.iter().map(|(b, _)| b.summary.final_gini));
    let g_full = mean(p.iter().map(|(_, f)| f.summary.final_gini));
    let wins = p.iter().filter(|(b, f)| f.summary.final_map >= b.summary.final_map).count();
    let maps: Vec<String> =
        p.iter().map(|(b, f)| format!("{:.3}/{:.3}", b.summary.final_map, f.summary.final_map)).collect();
    let budget = ab.elapsed < Duration::from_secs(30 * 60);
    verdict(
        p.len() == 5 && g_full < g_base && wins >= 4 && budget,
        format!(
            "mean Gini baseline {g_base:.4} vs D+Q {g_full:.4}; mAP(D+Q) ≥ mAP(base) on {wins}/5 seeds [{}]; 4-config sweep {:.0}s",
            maps.join(" "),
            ab.elapsed.as_secs_f64()
        ),
    )
}

fn convergence(ab: &Ablation) -> Verdict {
    let p = pairs(ab, (true, true));
    let mut wins = 0;
    let mut detail = Vec::new();
    for (b, f) in &p {
        let thr = 0.5 * b.summary.final_map;
        let eb = epochs_to_threshold(&b.rows, thr);
        let ef = epochs_to_threshold(&f.rows, thr);
        let ok = match (ef, eb) {
            (Some(x), Some(y)) => x <= y,
            (Some(_), None) => true,
            _ => false,
        };
        wins += ok as usize;
        let show = |e: Option<usize>| e.map_or("never".to_string(), |e| e.to_string());
        detail.push(format!("{}≤{}", show(ef), show(eb)));
    }
    verdict(
        p.len() == 5 && wins >= 4,
        format!("D+Q reaches 0.5×baseline mAP no later on {wins}/5 seeds (D+Q vs base epochs: {})", detail.join(" ")),
    )
}

fn ablation_table(ab: &Ablation, out: &Path) -> Result<Verdict> {
    let base = ab.root.join("assignment=one-to-one__model.mode=static__seed=0");
    let c = harness::compare(&[ab.root.clone()], &base)?;
    c.write(out)?;
    let csv = fs::read_to_string(out.join(harness::compare::COMPARISON_CSV)).unwrap_or_default();
    let layout: Vec<(bool, bool)> = c.rows.iter().map(|r| (r.dynamic, r.quality_aware)).collect();
    let want = vec![(false, false), (false, true), (true, false), (true, true)];
    let b = c.row(false, false).map_or(f64::NAN, |r| r.map_mean);
    let d = c.row(true, false).map_or(f64::NAN, |r| r.map_mean);
    let q = c.row(false, true).map_or(f64::NAN, |r| r.map_mean);
    let full = c.row(true, true).map_or(f64::NAN, |r| r.map_mean);
    let complete = ab.failures.is_empty() && c.rows.iter().all(|r| r.seeds == 5);
    Ok(verdict(
        complete && layout == want && csv.lines().count() == 5 && d >= b && q >= b,
        format!(
            "{} rows; mean mAP baseline {b:.4}, D {d:.4}, Q {q:.4}, D+Q {full:.4}; failed runs {:?}",
            c.rows.len(),
            ab.failures
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn reduction() -> Result<Verdict> {
    let mut dynamic_cfg = TrainConfig {
        beta: 0.0,
        ..TrainConfig::default()
    };
    dynamic_cfg.model.m = dynamic_cfg.model.n;
    let static_cfg = TrainConfig {
        model: ModelConfig {
            mode: QueryMode::Static,
            ..dynamic_cfg.model.clone()
        },
        ..dynamic_cfg.clone()
    };
    let stat = static_cfg.init_model()?;
    let mut dynm = dynamic_cfg.init_model()?;
    let shared = dynm.store.copy_matching_from(&stat.store);
    let table = stat.store.get(stat.store.find("queries").expect("static table")).clone();
    let pid = dynm.store.find("patterns").expect("pattern bank");
    dynm.store.get_mut(pid).data_mut().copy_from_slice(table.data());
    dynm.pin_weights(Tensor::identity(dynamic_cfg.model.n))?;

    let scenes: Vec<_> = (0..3).map(|s| render_scene(1000 + s, &static_cfg.scene)).collect::<Result<_>>()?;
    let mut same = 0;
    let mut detail = Vec::new();
    for scene in &scenes {
        let loss = |model: &DetectorModel, cfg: &TrainConfig| -> Result<f64> {
            let tape = Tape::new();
            let decoded = model.decode(&model.store.bind(&tape), scene)?;
            Ok(total_loss(&decoded, &scene.gts, cfg)?.0.item())
        };
        let (a, b) = (loss(&stat, &static_cfg)?, loss(&dynm, &dynamic_cfg)?);
        same += (a.to_bits() == b.to_bits()) as usize;
        detail.push(format!("{a:.6}"));
    }

    // and the identity keeps holding through optimizer steps
    let mut ts = Trainer::new(static_cfg.clone(), stat)?;
    let mut td = Trainer::new(dynamic_cfg.clone(), dynm)?;
    let batch: Vec<&_> = scenes.iter().collect();
    let mut steps_same = true;
    for _ in 0..3 {
        let a = ts.step(&batch, 0.05)?.total;
        let b = td.step(&batch, 0.05)?.total;
        steps_same &= a.to_bits() == b.to_bits();
    }
    let q = ts.model.store.get(ts.model.store.find("queries").unwrap()).data().to_vec();
    let p = td.model.store.get(td.model.store.find("patterns").unwrap()).data().to_vec();
    steps_same &= q == p;

    Ok(verdict(
        same == 3 && steps_same,
        format!(
            "{same}/3 scene losses bit-identical [{}], {shared} shared tensors copied, identical after 3 steps: {steps_same}",
            detail.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn determinism(dir: &Path) -> Result<Verdict> {
    let cfg = TrainConfig {
        epochs: 3,
        train_scenes: 24,
        val_scenes: 8,
        seed: 17,
        ..TrainConfig::default()
    };
    let mut files = Vec::new();
    for name in ["first", "second"] {
        let d = dir.join(name);
        harness::train_into(&d, &cfg)?;
        files.push(fs::read(d.join(harness::run::EPOCHS_FILE)).unwrap_or_default());
    }
    // the stored snapshot alone reproduces the run
    let snap: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.join("first/config.json")).unwrap_or_default())?;
    let d = dir.join("from-snapshot");
    harness::train_into(&d, &snap)?;
    files.push(fs::read(d.join(harness::run::EPOCHS_FILE)).unwrap_or_default());
    let ok = !files[0].is_empty() && files.iter().all(|f| f == &files[0]);
    Ok(verdict(ok, format!("3 runs of seed 17, {} CSV bytes each, identical: {ok}", files[0].len())))
}

// ----------------------------------------------------------------

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut all_pass = true;
    let mut report = |n: usize, name: &str, v: Result<Verdict>| {
        let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        all_pass &= v.pass;
        println!("{} {n} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };

    report(1, "matching oracle", oracle_matching());
    report(2, "assignment oracle", oracle_assignment());
    report(3, "gradient suite", gradient_suite());
    report(4, "convexity and normalization", convexity());
    match run_ablation(tmp.path()) {
        Ok(ab) => {
            report(5, "Gini direction", Ok(gini_direction(&ab)));
            report(6, "convergence direction", Ok(convergence(&ab)));
            report(7, "component ablation", ablation_table(&ab, &tmp.path().join("report")));
        }
        Err(e) => {
            for (n, name) in [(5, "Gini direction"), (6, "convergence direction"), (7, "component ablation")] {
                report(n, name, Err(paq_core::Error::InvalidArgument(format!("sweep failed: {e}"))));
            }
        }
    }
    report(8, "reduction to static queries", reduction());
    report(9, "determinism", determinism(&tmp.path().join("det")));

    if !all_pass {
        std::process::exit(1);
    }
}
