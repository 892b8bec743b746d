//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `IFFNN_ACCEPTANCE=1,3,8` restricts the run to the listed criteria.
//! MNIST is read from `$IFFNN_DATA_ROOT/mnist`, falling back to the copy in
//! the repository's `data/mnist`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use iffnn::autodiff::{grad_check, relative_error, Activation, ParamId, Tape, Var};
use iffnn::datasets::DatasetSplit;
use iffnn::inben::{self, InbenParams, InbenSpec, Pattern};
use iffnn::interpret::{self, ImportanceMap};
use iffnn::models::{ConvBlock, HeadKind, Model, ModelSpec, Trunk, VariantName};
use iffnn::training::{evaluate_accuracy, train, TrainConfig};
use iffnn::Tensor;
use iffnn_cli::commands;
use iffnn_cli::config::{DatasetRef, InbenGenConfig, ModelChoice, TrainRunConfig};
use iffnn_cli::data::{prepare, PreparedData};
use iffnn_cli::manifest::RunManifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MNIST2_EPOCHS: usize = 10;
const MNIST10_EPOCHS: usize = 15;
const INBEN_EPOCHS: usize = 30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Fixed pseudo-random weights for turning a tensor output into a scalar.
fn weights_for(shape: &[usize]) -> Tensor {
    random(&mut ChaCha8Rng::seed_from_u64(99), shape, -1.0, 1.0)
}

fn weighted_sum<'t>(tape: &'t Tape, v: Var<'t>) -> iffnn::tensor::Result<Var<'t>> {
    let c = weights_for(&v.shape());
    v.mul(&tape.constant(&c))?.sum()
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

struct Ctx {
    work: tempfile::TempDir,
    mnist: PathBuf,
    mnist2: Option<PreparedData>,
    mnist10: Option<PreparedData>,
    inben: Option<(PathBuf, PreparedData)>,
    runs: Vec<(String, Run)>,
}

impl Ctx {
    fn data_mnist10(&mut self) -> Result<&PreparedData, String> {
        if self.mnist10.is_none() {
            self.mnist10 = Some(prepare(&DatasetRef::Mnist(self.mnist.clone()), None, 0).map_err(err)?);
        }
        Ok(self.mnist10.as_ref().unwrap())
    }

    fn data_mnist2(&mut self) -> Result<&PreparedData, String> {
        if self.mnist2.is_none() {
            self.mnist2 = Some(prepare(&DatasetRef::MnistPair(self.mnist.clone(), 0, 1), None, 0).map_err(err)?);
        }
        Ok(self.mnist2.as_ref().unwrap())
    }

    /// Desk-scale INBEN: m = 100, c = 10, 20k / 2k / 2k, seeds 0.
    fn data_inben(&mut self) -> Result<&(PathBuf, PreparedData), String> {
        if self.inben.is_none() {
            let cfg = InbenGenConfig {
                params: InbenParams {
                    m: 100,
                    classes: 10,
                    ..InbenParams::default()
                },
                data_seed: 0,
                sizes: [20_000, 2_000, 2_000],
                threads: 0,
            };
            let dir = self.work.path().join("inben");
            commands::inben_gen(&cfg, &dir).map_err(err)?;
            let path = dir.join(commands::DATASET_FILE);
            let data = prepare(&DatasetRef::Inben(path.clone()), None, 0).map_err(err)?;
            self.inben = Some((path, data));
        }
        Ok(self.inben.as_ref().unwrap())
    }

    /// Trains (once) `model` on `dataset` (`mnist2`, `mnist10` or `inben`).
    fn run(&mut self, dataset: &str, model: &str, epochs: usize) -> Result<&Run, String> {
        let key = format!("{dataset}/{model}/{epochs}");
        if let Some(i) = self.runs.iter().position(|(k, _)| *k == key) {
            return Ok(&self.runs[i].1);
        }
        let dataset_ref = match dataset {
            "mnist2" => DatasetRef::MnistPair(self.mnist.clone(), 0, 1),
            "mnist10" => DatasetRef::Mnist(self.mnist.clone()),
            _ => DatasetRef::Inben(self.data_inben()?.0.clone()),
        };
        let cfg = TrainRunConfig {
            dataset: dataset_ref,
            valid_size: None,
            valid_seed: 0,
            model: ModelChoice::Named(model.parse::<VariantName>().map_err(err)?),
            seed: 0,
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
        };
        let data = match dataset {
            "mnist2" => self.data_mnist2()?.clone(),
            "mnist10" => self.data_mnist10()?.clone(),
            _ => self.data_inben()?.1.clone(),
        };
        let dir = self.work.path().join(key.replace('/', "-"));
        let start = Instant::now();
        let manifest = commands::train_run(&cfg, &data, &dir, |e| {
            eprintln!(
                "  [{model} on {dataset}] epoch {:>2}  loss {:.5}  valid {:.2}%  test {:.2}%",
                e.epoch,
                e.train_loss,
                e.valid_accuracy * 100.0,
                e.test_accuracy * 100.0
            )
        })
        .map_err(err)?;
        eprintln!("  [{model} on {dataset}] trained in {:.0?}", start.elapsed());
        self.runs.push((key, Run { dir, manifest }));
        Ok(&self.runs.last().unwrap().1)
    }
}

fn criterion_1(_: &mut Ctx) -> Result<Outcome, String> {
    let start = Instant::now();
    type Check = Box<dyn Fn(&mut ChaCha8Rng) -> iffnn::tensor::Result<f64>>;
    let x34 = |rng: &mut ChaCha8Rng| random(rng, &[3, 4], -2.0, 2.0);
    let mut checks: Vec<(&str, Check)> = Vec::new();
    let h = 1e-5;
    checks.push((
        "affine/x",
        Box::new(move |rng| {
            let (w, b) = (random(rng, &[5, 4], -1.0, 1.0), random(rng, &[5], -1.0, 1.0));
            grad_check(
                |t, x| weighted_sum(t, x.affine(&t.constant(&w), Some(&t.constant(&b)))?),
                &x34(rng),
                h,
            )
        }),
    ));
    checks.push((
        "affine/w",
        Box::new(move |rng| {
            let (x, b) = (x34(rng), random(rng, &[5], -1.0, 1.0));
            grad_check(
                |t, w| weighted_sum(t, t.constant(&x).affine(&w, Some(&t.constant(&b)))?),
                &random(rng, &[5, 4], -1.0, 1.0),
                h,
            )
        }),
    ));
    checks.push((
        "affine/b",
        Box::new(move |rng| {
            let (x, w) = (x34(rng), random(rng, &[5, 4], -1.0, 1.0));
            grad_check(
                |t, b| weighted_sum(t, t.constant(&x).affine(&t.constant(&w), Some(&b))?),
                &random(rng, &[5], -1.0, 1.0),
                h,
            )
        }),
    ));
    for (name, act) in [
        ("relu", Activation::Relu),
        ("tanh", Activation::Tanh),
        ("identity", Activation::Identity),
    ] {
        checks.push((name, Box::new(move |rng| grad_check(|t, x| weighted_sum(t, x.activation(act)?), &x34(rng), h))));
    }
    checks.push(("sigmoid", Box::new(move |rng| grad_check(|t, x| weighted_sum(t, x.sigmoid()?), &x34(rng), h))));
    checks.push(("softmax", Box::new(move |rng| grad_check(|t, x| weighted_sum(t, x.softmax()?), &x34(rng), h))));
    checks.push((
        "reshape",
        Box::new(move |rng| grad_check(|t, x| weighted_sum(t, x.reshape(&[2, 6])?), &x34(rng), h)),
    ));
    checks.push(("flatten", Box::new(move |rng| grad_check(|t, x| weighted_sum(t, x.flatten()?), &x34(rng), h))));
    checks.push((
        "flatten_batch",
        Box::new(move |rng| {
            grad_check(
                |t, x| weighted_sum(t, x.flatten_batch()?),
                &random(rng, &[2, 3, 2], -2.0, 2.0),
                h,
            )
        }),
    ));
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        for side in 0..2 {
            let label = match (name, side) {
                ("add", 0) => "add/lhs",
                ("add", _) => "add/rhs",
                ("sub", 0) => "sub/lhs",
                ("sub", _) => "sub/rhs",
                ("mul", 0) => "mul/lhs",
                _ => "mul/rhs",
            };
            checks.push((
                label,
                Box::new(move |rng| {
                    let other = x34(rng);
                    grad_check(
                        |t, x| {
                            let o = t.constant(&other);
                            let (a, b) = if side == 0 { (x, o) } else { (o, x) };
                            weighted_sum(
                                t,
                                match op {
                                    0 => a.add(&b)?,
                                    1 => a.sub(&b)?,
                                    _ => a.mul(&b)?,
                                },
                            )
                        },
                        &x34(rng),
                        h,
                    )
                }),
            ));
        }
    }
    checks.push(("scale", Box::new(move |rng| grad_check(|t, x| weighted_sum(t, x.scale(-1.7)?), &x34(rng), h))));
    checks.push((
        "add_bias/x",
        Box::new(move |rng| {
            let b = random(rng, &[4], -1.0, 1.0);
            grad_check(|t, x| weighted_sum(t, x.add_bias(&t.constant(&b))?), &x34(rng), h)
        }),
    ));
    checks.push((
        "add_bias/b",
        Box::new(move |rng| {
            let x = x34(rng);
            grad_check(|t, b| weighted_sum(t, t.constant(&x).add_bias(&b)?), &random(rng, &[4], -1.0, 1.0), h)
        }),
    ));
    checks.push((
        "rowwise_dot/w",
        Box::new(move |rng| {
            let x = x34(rng);
            grad_check(
                |t, w| weighted_sum(t, w.rowwise_dot(&t.constant(&x))?),
                &random(rng, &[3, 5, 4], -1.0, 1.0),
                h,
            )
        }),
    ));
    checks.push((
        "rowwise_dot/x",
        Box::new(move |rng| {
            let w = random(rng, &[3, 5, 4], -1.0, 1.0);
            grad_check(|t, x| weighted_sum(t, t.constant(&w).rowwise_dot(&x)?), &x34(rng), h)
        }),
    ));
    checks.push(("sum", Box::new(move |rng| grad_check(|_, x| x.sum(), &x34(rng), h))));
    checks.push((
        "cross_entropy",
        Box::new(move |rng| {
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            grad_check(|_, x| x.cross_entropy(&labels), &x34(rng), h)
        }),
    ));
    checks.push((
        "binary_cross_entropy",
        Box::new(move |rng| {
            let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..2)).collect();
            grad_check(|_, x| x.binary_cross_entropy(&labels), &random(rng, &[6], -3.0, 3.0), h)
        }),
    ));
    for (stride, padding) in [(1, 1), (2, 0)] {
        let tag = if stride == 1 { "s1p1" } else { "s2p0" };
        let names = match tag {
            "s1p1" => ["conv2d/x s1p1", "conv2d/k s1p1", "conv2d/b s1p1"],
            _ => ["conv2d/x s2p0", "conv2d/k s2p0", "conv2d/b s2p0"],
        };
        checks.push((
            names[0],
            Box::new(move |rng| {
                let (k, b) = (random(rng, &[3, 2, 3, 3], -1.0, 1.0), random(rng, &[3], -1.0, 1.0));
                grad_check(
                    |t, x| weighted_sum(t, x.conv2d(&t.constant(&k), Some(&t.constant(&b)), stride, padding)?),
                    &random(rng, &[2, 2, 5, 5], -1.0, 1.0),
                    h,
                )
            }),
        ));
        checks.push((
            names[1],
            Box::new(move |rng| {
                let (x, b) = (random(rng, &[2, 2, 5, 5], -1.0, 1.0), random(rng, &[3], -1.0, 1.0));
                grad_check(
                    |t, k| weighted_sum(t, t.constant(&x).conv2d(&k, Some(&t.constant(&b)), stride, padding)?),
                    &random(rng, &[3, 2, 3, 3], -1.0, 1.0),
                    h,
                )
            }),
        ));
        checks.push((
            names[2],
            Box::new(move |rng| {
                let (x, k) = (random(rng, &[2, 2, 5, 5], -1.0, 1.0), random(rng, &[3, 2, 3, 3], -1.0, 1.0));
                grad_check(
                    |t, b| weighted_sum(t, t.constant(&x).conv2d(&t.constant(&k), Some(&b), stride, padding)?),
                    &random(rng, &[3], -1.0, 1.0),
                    h,
                )
            }),
        ));
    }
    checks.push((
        "maxpool2d",
        Box::new(move |rng| {
            grad_check(
                |t, x| weighted_sum(t, x.maxpool2d(2, 2)?),
                &random(rng, &[2, 2, 4, 4], -2.0, 2.0),
                h,
            )
        }),
    ));

    let mut worst_primitive = (0.0f64, "");
    for (name, check) in &checks {
        for point in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
            let e = check(&mut rng).map_err(|e| format!("{name}: {e}"))?;
            if e > worst_primitive.0 {
                worst_primitive = (e, name);
            }
        }
    }

    // end-to-end losses with respect to every parameter coordinate
    let trunks = [
        Trunk::Fc { hidden: vec![6, 5] },
        Trunk::Highway { hidden: vec![5, 5] },
        Trunk::Cnn {
            blocks: vec![ConvBlock { kernels: 3, size: 3, pool: 2 }],
        },
    ];
    let mut worst_e2e = (0.0f64, String::new());
    for trunk in &trunks {
        for head in [HeadKind::IffnnBc, HeadKind::IffnnMc] {
            let classes = if head.is_binary() { 2 } else { 3 };
            for point in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(2000 + point);
                let spec = ModelSpec {
                    trunk: trunk.clone(),
                    activation: Activation::Relu,
                    head,
                    input_shape: vec![6, 6],
                    classes,
                    seed: point,
                };
                let mut model = Model::build(&spec).map_err(err)?;
                // nonzero biases so every parameter path is exercised
                for (name, p) in model.names().to_vec().iter().zip(model.params().to_vec()) {
                    if name.ends_with("bias") || name.ends_with("b2") {
                        model.set_param(name, random(&mut rng, p.shape(), -0.5, 0.5)).map_err(err)?;
                    }
                }
                let x = random(&mut rng, &[3, 6, 6], 0.0, 1.0);
                let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..classes)).collect();
                let tape = Tape::new();
                let grads = model
                    .loss(&tape, &x, &labels)
                    .map_err(err)?
                    .backward()
                    .map_err(err)?
                    .into_params();
                let loss_at = |m: &Model| m.loss(&Tape::new(), &x, &labels).unwrap().value().item();
                for p in 0..model.params().len() {
                    let g = grads.get(ParamId(p)).ok_or("missing gradient")?.clone();
                    for i in 0..g.len() {
                        let mut plus = model.clone();
                        plus.param_mut(ParamId(p)).data_mut()[i] += h;
                        let mut minus = model.clone();
                        minus.param_mut(ParamId(p)).data_mut()[i] -= h;
                        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                        let e = relative_error(g.data()[i], numeric);
                        if e > worst_e2e.0 {
                            worst_e2e = (e, format!("{} / {head} / {}", trunk.kind(), model.names()[p]));
                        }
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_primitive.0 < 1e-6 && worst_e2e.0 < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{} primitive checks x 10 points, worst {:.2e} ({}); end-to-end IFFNN-BC/MC on 3 trunks x 10 points, \
             worst {:.2e} ({}); {:.1?}",
            checks.len(),
            worst_primitive.0,
            worst_primitive.1,
            worst_e2e.0,
            worst_e2e.1,
            elapsed
        ),
    )
}

fn criterion_2(_: &mut Ctx) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut antisymmetric = true;
    let mut checked = 0;
    for (head, classes) in [(HeadKind::IffnnBc, 2), (HeadKind::IffnnMc, 10)] {
        let spec = ModelSpec {
            trunk: Trunk::Fc { hidden: vec![64, 64] },
            activation: Activation::Relu,
            head,
            input_shape: vec![50],
            classes,
            seed: 7,
        };
        let mut model = Model::build(&spec).map_err(err)?;
        for name in ["head.b2", "head.bias"] {
            let shape = model.param(name).unwrap().shape().to_vec();
            model.set_param(name, random(&mut rng, &shape, -0.5, 0.5)).map_err(err)?;
        }
        for _ in 0..10 {
            let x = random(&mut rng, &[100, 50], -1.0, 1.0);
            let logits = model.logits(&x).map_err(err)?;
            for (b, e) in interpret::explain_batch(&model, &x).map_err(err)?.iter().enumerate() {
                worst = worst.max(interpret::additivity_error(e));
                if head.is_binary() {
                    let z = logits.data()[b];
                    antisymmetric &= e.logits == [-z, z];
                    antisymmetric &= e.map.row(0).iter().zip(e.map.row(1)).all(|(a, b)| *a == -*b);
                } else {
                    // the explained logits are the model's logits
                    worst = worst.max(
                        logits.data()[b * classes..(b + 1) * classes]
                            .iter()
                            .zip(&e.logits)
                            .map(|(a, b)| relative_error(*a, *b))
                            .fold(0.0, f64::max),
                    );
                }
                checked += 1;
            }
        }
    }
    outcome(
        worst < 1e-9 && antisymmetric && checked == 2000,
        format!("{checked} inputs (1,000 per head), worst relative gap {worst:.2e}, bc rows exact negations: {antisymmetric}"),
    )
}

fn criterion_3(_: &mut Ctx) -> Result<Outcome, String> {
    // the worked example's two class-2 patterns, 1-based in the text
    let one_based = |v: &[usize]| v.iter().map(|i| i - 1).collect::<Vec<_>>();
    let spec = InbenSpec::from_parts(
        400,
        3,
        vec![
            Pattern {
                class: 2,
                indices: one_based(&[113, 251]),
            },
            Pattern {
                class: 2,
                indices: one_based(&[35, 72, 99, 217, 251]),
            },
            Pattern {
                class: 1,
                indices: one_based(&[1, 2]),
            },
        ],
        vec![2, 1],
        0,
        0.5,
    )
    .map_err(err)?;
    let mut x = vec![0u8; 400];
    for i in one_based(&[35, 72, 99, 113, 217, 251, 7, 12, 221, 308]) {
        x[i] = 1;
    }
    let s1 = inben::ground_truth_features(&spec, &x).map_err(err)?;
    let s1_text: Vec<usize> = s1.iter().map(|i| i + 1).collect();

    // scores that rank 113, 251, 7, 35, 12, 308, 221 first, in that order
    let order = one_based(&[113, 251, 7, 35, 12, 308, 221]);
    let mut scores = vec![0.0; 3 * 400];
    for (rank, &i) in order.iter().enumerate() {
        scores[2 * 400 + i] = 10.0 - rank as f64;
    }
    let map = ImportanceMap::new(Tensor::new(&[3, 400], scores).map_err(err)?, &[400]).map_err(err)?;
    let ranking = interpret::rank_features(&map, 2).map_err(err)?;
    let acc = interpret::accuracy_at_n(&s1, &ranking).map_err(err)?;
    outcome(
        s1_text == [35, 72, 99, 113, 217, 251] && acc == 0.5,
        format!("S1 = {s1_text:?}, top-6 = {:?}, Accuracy@N = {acc}", ranking[..6].iter().map(|i| i + 1).collect::<Vec<_>>()),
    )
}

fn criterion_4(ctx: &mut Ctx) -> Result<Outcome, String> {
    let start = Instant::now();
    let run = ctx.run("mnist2", "FC-IFFNN-BC", MNIST2_EPOCHS)?;
    let m = &run.manifest;
    let elapsed = start.elapsed();
    outcome(
        m.test_accuracy >= 0.995 && elapsed < Duration::from_secs(600),
        format!(
            "FC-IFFNN-BC on digits 0/1 ({} train / {} valid / {} test), {} epochs: selected epoch {}, test {:.2}%; {:.0?}",
            m.dataset.train.size,
            m.dataset.valid.size,
            m.dataset.test.size,
            m.epochs_run,
            m.selected_epoch,
            m.test_accuracy * 100.0,
            elapsed
        ),
    )
}

fn criterion_5(ctx: &mut Ctx) -> Result<Outcome, String> {
    let fc = ctx.run("mnist10", "FC-IFFNN-MC", MNIST10_EPOCHS)?.manifest.test_accuracy;
    let sr = ctx.run("mnist10", "SR", MNIST10_EPOCHS)?.manifest.test_accuracy;
    let gap = (fc - sr) * 100.0;
    outcome(
        fc >= 0.97 && sr <= 0.94 && gap >= 3.0,
        format!(
            "{} epochs: FC-IFFNN-MC {:.2}% (>= 97), SR {:.2}% (<= 94), gap {gap:.2} points (>= 3)",
            MNIST10_EPOCHS,
            fc * 100.0,
            sr * 100.0
        ),
    )
}

fn criterion_6(ctx: &mut Ctx) -> Result<Outcome, String> {
    let start = Instant::now();
    let mut metrics = Vec::new();
    for model in ["SR", "FC-IFFNN-MC", "HW-IFFNN-MC"] {
        let m = &ctx.run("inben", model, INBEN_EPOCHS)?.manifest;
        let acc_n = m.accuracy_at_n.ok_or(format!("{model} has no Accuracy@N"))?.mean;
        metrics.push((m.test_accuracy * 100.0, acc_n * 100.0));
    }
    let elapsed = start.elapsed();
    let [(sr_acc, sr_n), (fc_acc, fc_n), (hw_acc, hw_n)] = metrics[..] else {
        unreachable!()
    };
    let a = fc_acc - sr_acc >= 2.0;
    let b = fc_n >= 90.0 && fc_n - sr_n >= 5.0;
    let c = (hw_acc - fc_acc).abs() <= 2.0 && (hw_n - fc_n).abs() <= 2.0;
    let fast = elapsed < Duration::from_secs(900);
    outcome(
        a && b && c && fast,
        format!(
            "acc / Accuracy@N: SR {sr_acc:.2} / {sr_n:.2}, FC-IFFNN-MC {fc_acc:.2} / {fc_n:.2}, HW-IFFNN-MC {hw_acc:.2} / {hw_n:.2}; \
             (a) {} (b) {} (c) {} (|HW-FC| = {:.2} / {:.2}); {:.0?}",
            verdict(a),
            verdict(b),
            verdict(c),
            (hw_acc - fc_acc).abs(),
            (hw_n - fc_n).abs(),
            elapsed
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn criterion_7(_: &mut Ctx) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = 20;
    let mut worst: f64 = 0.0;
    for (plain, iffnn_head, classes) in [(HeadKind::PlainMc, HeadKind::IffnnMc, 5), (HeadKind::PlainBc, HeadKind::IffnnBc, 2)] {
        let rows = if plain == HeadKind::PlainMc { classes } else { 1 };
        let mut linear = Model::build(&ModelSpec {
            trunk: Trunk::None,
            activation: Activation::Relu,
            head: plain,
            input_shape: vec![m],
            classes,
            seed: 1,
        })
        .map_err(err)?;
        let mut iffnn = Model::build(&ModelSpec {
            trunk: Trunk::Fc { hidden: vec![16, 16] },
            activation: Activation::Relu,
            head: iffnn_head,
            input_shape: vec![m],
            classes,
            seed: 1,
        })
        .map_err(err)?;
        let w = random(&mut rng, &[rows, m], -1.0, 1.0);
        let b = random(&mut rng, &[rows], -1.0, 1.0);
        linear.set_param("head.weight", w.clone()).map_err(err)?;
        linear.set_param("head.bias", b.clone()).map_err(err)?;
        let w2_shape = iffnn.param("head.w2").unwrap().shape().to_vec();
        let b2_shape = iffnn.param("head.b2").unwrap().shape().to_vec();
        iffnn.set_param("head.w2", Tensor::zeros(&w2_shape)).map_err(err)?;
        iffnn.set_param("head.b2", w.reshape(&b2_shape).map_err(err)?).map_err(err)?;
        iffnn.set_param("head.bias", b).map_err(err)?;
        let x = random(&mut rng, &[100, m], -2.0, 2.0);
        worst = worst.max(linear.logits(&x).map_err(err)?.max_abs_diff(&iffnn.logits(&x).map_err(err)?));
    }

    let xor = DatasetSplit::new(&[2], 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0], vec![0, 1, 1, 0]).map_err(err)?;
    let config = TrainConfig {
        batch_size: 4,
        epochs: 2000,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let sr = Model::build(&VariantName::Sr.spec(&[2], 2, 0).map_err(err)?).map_err(err)?;
    let (sr, _) = train(sr, &xor, &xor, &xor, &config).map_err(err)?;
    let sr_acc = evaluate_accuracy(&sr, &xor).map_err(err)?;
    let spec = ModelSpec {
        trunk: Trunk::Fc { hidden: vec![16, 16] },
        activation: Activation::Relu,
        head: HeadKind::IffnnMc,
        input_shape: vec![2],
        classes: 2,
        seed: 0,
    };
    let (fc, _) = train(Model::build(&spec).map_err(err)?, &xor, &xor, &xor, &config).map_err(err)?;
    let fc_acc = evaluate_accuracy(&fc, &xor).map_err(err)?;
    outcome(
        worst <= 1e-12 && sr_acc <= 0.75 && fc_acc == 1.0,
        format!(
            "W2 = 0 vs LR/SR on 100 inputs each: max |logit gap| {worst:.1e}; XOR: SR {:.0}%, FC-IFFNN-MC {:.0}%",
            sr_acc * 100.0,
            fc_acc * 100.0
        ),
    )
}

fn criterion_8(_: &mut Ctx) -> Result<Outcome, String> {
    let params = InbenParams {
        m: 100,
        classes: 10,
        seed: 8,
        ..InbenParams::default()
    };
    let spec = inben::generate_spec(&params).map_err(err)?;
    let sizes = [40_000, 5_000, 5_000];
    let data = inben::generate_dataset(&spec, sizes, 8, 1).map_err(err)?;
    let (mut relabel, mut priority, mut support, mut union, mut total) = (0, 0, 0, 0, 0);
    for s in data.train.iter().chain(&data.valid).chain(&data.test) {
        total += 1;
        if inben::label_sample(&spec, &s.x).class == s.label {
            relabel += 1;
        }
        let higher = &spec.priority[..spec.rank(s.label).min(spec.priority.len())];
        let own_match = spec.patterns_of(s.label).any(|(_, p)| p.matches(&s.x));
        let any_match = spec.patterns.iter().any(|p| p.matches(&s.x));
        let sound = higher.iter().all(|&c| spec.patterns_of(c).all(|(_, p)| !p.matches(&s.x)))
            && (own_match || (s.label == spec.default_class && !any_match));
        if sound {
            priority += 1;
        }
        if s.ground_truth.iter().all(|&i| s.x[i] == 1) {
            support += 1;
        }
        let mut expected: Vec<usize> = spec
            .patterns_of(s.label)
            .filter(|(_, p)| p.matches(&s.x))
            .flat_map(|(_, p)| p.indices.iter().copied())
            .collect();
        expected.sort_unstable();
        expected.dedup();
        if expected == s.ground_truth {
            union += 1;
        }
    }
    let one = inben::encode(&data);
    let two = inben::encode(&inben::generate_dataset(&spec, sizes, 8, 1).map_err(err)?);
    let four = inben::encode(&inben::generate_dataset(&spec, sizes, 8, 4).map_err(err)?);
    let deterministic = one == two && one == four;
    outcome(
        total == 50_000 && relabel == total && priority == total && support == total && union == total && deterministic,
        format!(
            "{total} samples: relabel {relabel}, priority {priority}, S1 in support {support}, S1 = matched union {union}; \
             bytes equal across runs and 1 vs 4 threads: {deterministic}"
        ),
    )
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), String> {
    let bytes = fs::read(path).map_err(err)?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or("short PGM header")?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(err)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(format!("{}: bad PGM header {header:?}", path.display()));
    }
    let (w, h): (usize, usize) = (fields[1].parse().map_err(err)?, fields[2].parse().map_err(err)?);
    let pixels = bytes[header_end..].to_vec();
    if pixels.len() != w * h {
        return Err(format!("{}: {} pixels for {w}x{h}", path.display(), pixels.len()));
    }
    Ok((w, h, pixels))
}

fn criterion_9(ctx: &mut Ctx) -> Result<Outcome, String> {
    let run = ctx.run("mnist10", "FC-IFFNN-MC", MNIST10_EPOCHS)?;
    let ckpt = run.dir.join(commands::CHECKPOINT_FILE);
    let out = ctx.work.path().join("figure");
    let model = iffnn::models::load_checkpoint(&ckpt).map_err(err)?;
    let data = ctx.data_mnist10()?.clone();
    let test = &data.test;

    // the first five correctly classified test digits of each class
    let mut picks: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for i in 0..test.len() {
        let label = test.labels()[i];
        if label > 1 || picks[label].len() == 5 {
            continue;
        }
        let (x, _) = test.example(i);
        if interpret::explain(&model, &x).map_err(err)?.predicted == label {
            picks[label].push(i);
        }
    }
    let samples: Vec<usize> = picks.concat();
    commands::interpret(&ckpt, &data, &samples, &[], &out).map_err(err)?;
    let mut pgms = 0;
    for &i in &samples {
        let (w, h, _) = read_pgm(&out.join(format!("sample-{i}-input.pgm")))?;
        if (w, h) != (28, 28) {
            return Err(format!("sample {i} image is {w}x{h}"));
        }
        pgms += 1;
        for j in 0..10 {
            let (w, h, _) = read_pgm(&out.join(format!("sample-{i}-class-{j}.pgm")))?;
            if (w, h) != (28, 28) {
                return Err(format!("sample {i} class {j} map is {w}x{h}"));
            }
            pgms += 1;
        }
    }

    // stroke pixels are those with intensity >= 0.5
    let mut wins = 0;
    let mut means = Vec::new();
    for &i in &picks[0] {
        let (x, _) = test.example(i);
        let e = interpret::explain(&model, &x).map_err(err)?;
        let stroke: Vec<usize> = (0..784).filter(|&p| x.data()[p] >= 0.5).collect();
        let mean = |class: usize| stroke.iter().map(|&p| e.map.row(class)[p]).sum::<f64>() / stroke.len() as f64;
        let (to0, to1) = (mean(0), mean(1));
        if to0 > 0.0 && to0 > to1 {
            wins += 1;
        }
        means.push(format!("{to0:+.3}/{to1:+.3}"));
    }
    // one-sided sign test: 5 of 5 gives p = 1/32
    let p_value = (wins..=5).map(|k| binomial(5, k)).sum::<f64>() / 32.0;
    outcome(
        pgms == 110 && picks[0].len() == 5 && picks[1].len() == 5 && p_value <= 0.05,
        format!(
            "{pgms} valid PGMs for test digits {samples:?}; stroke importance toward 0 / toward 1 per \"0\": [{}], \
             {wins}/5 positive and larger, sign test p = {p_value:.4}",
            means.join(", ")
        ),
    )
}

fn binomial(n: u64, k: u64) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64)
}

fn criterion_10(ctx: &mut Ctx) -> Result<Outcome, String> {
    ctx.run("mnist2", "FC-IFFNN-BC", MNIST2_EPOCHS)?;
    ctx.run("inben", "SR", INBEN_EPOCHS)?;
    let targets: Vec<(String, RunManifest)> = ctx
        .runs
        .iter()
        .filter(|(k, _)| k.starts_with("mnist2/") || k.starts_with("inben/SR/"))
        .map(|(k, r)| (k.clone(), r.manifest.clone()))
        .collect();
    let mut details = Vec::new();
    let mut all = true;
    for (key, recorded) in targets {
        let dir = ctx.work.path().join(format!("replay-{}", key.replace('/', "-")));
        let same = match commands::replay(&recorded, &dir, |_| {}) {
            Ok(again) => {
                again.checkpoint.sha256 == recorded.checkpoint.sha256
                    && again.valid_accuracy.to_bits() == recorded.valid_accuracy.to_bits()
                    && again.test_accuracy.to_bits() == recorded.test_accuracy.to_bits()
                    && again == recorded
            }
            Err(e) => {
                details.push(format!("{key}: {e}"));
                false
            }
        };
        all &= same;
        details.push(format!("{} {}", recorded.model, if same { "identical" } else { "DIFFERS" }));
    }
    outcome(all, format!("replayed manifests: {}", details.join(", ")))
}

type Criterion = fn(&mut Ctx) -> Result<Outcome, String>;

fn main() {
    let criteria: [(u32, &str, Criterion); 10] = [
        (1, "gradient checks", criterion_1),
        (2, "decomposition identity", criterion_2),
        (3, "worked Accuracy@N example", criterion_3),
        (4, "MNIST 2-class FC-IFFNN-BC", criterion_4),
        (5, "MNIST 10-class FC-IFFNN-MC vs SR", criterion_5),
        (6, "INBEN desk scale", criterion_6),
        (7, "reductions and XOR", criterion_7),
        (8, "INBEN oracle properties", criterion_8),
        (9, "interpretation images", criterion_9),
        (10, "manifest replay", criterion_10),
    ];
    let only: Option<Vec<u32>> = std::env::var("IFFNN_ACCEPTANCE")
        .ok()
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mnist = match std::env::var_os("IFFNN_DATA_ROOT") {
        Some(root) if Path::new(&root).join("mnist").is_dir() => PathBuf::from(root).join("mnist"),
        _ => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    };
    eprintln!("acceptance: MNIST from {}", mnist.display());
    let mut ctx = Ctx {
        work: tempfile::tempdir().expect("temp dir"),
        mnist,
        mnist2: None,
        mnist10: None,
        inben: None,
        runs: Vec::new(),
    };

    let mut lines = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        eprintln!("criterion {id}: {name} ...");
        let start = Instant::now();
        let line = match run(&mut ctx) {
            Ok(o) => format!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("FAIL criterion {id} ({name}): error: {e}"),
        };
        println!("{line}  [{:.1?}]", start.elapsed());
        lines.push(line);
    }
    let failed = lines.iter().filter(|l| l.starts_with("FAIL")).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
