use std::path::{Path, PathBuf};
use std::sync::Arc;

use fastshap_core::data::{ingest, synthetic_logistic, Dataset, SyntheticSpec};
use fastshap_core::eval::{
    accuracy_benchmark, accuracy_csv, argmax, auc_csv, crossover_csv, fraction_grid, ground_truth, inclusion_exclusion,
    predicted_labels, random_ranking_baseline, BenchmarkInstance,
};
use fastshap_core::exact::{shapley_brute_force, Attribution};
use fastshap_core::fastshap::{explain, train_fastshap, ExplainerManifest, ExplainerNet, FastShapConfig};
use fastshap_core::game::SubsetMask;
use fastshap_core::nn::{Classifier, DenseNet, TrainConfig, TrainLog};
use fastshap_core::pipeline::{train_classifier, ValueFunctionBuilder, ValueFunctionKind};
use fastshap_core::rng::{derive, derive_seed};
use fastshap_core::surrogate::{train_surrogate, SubsetDistribution, SurrogateModel};
use fastshap_core::valuefn::{game_for_class, ValueFunction};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, Kind};
use crate::config::{RunConfig, Stage};
use crate::error::CliError;

const MODEL_FILE: &str = "model.json";
const SURROGATE_FILE: &str = "surrogate.json";
const EXPLAINER_FILE: &str = "explainer.json";
const TRAINING_LOG: &str = "training_log.json";

/// A loaded config plus where its artifacts live.
pub struct Context {
    pub config: RunConfig,
    pub root: PathBuf,
}

impl Context {
    fn seed(&self, stage: Stage) -> u64 {
        self.config.stage_seed(stage)
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        let c = &self.config;
        Ok(ingest(
            &c.dataset.path,
            &c.dataset.schema(),
            &c.split,
            self.seed(Stage::Split),
        )?)
    }

    /// Latest artifact of `kind` built from the same data.
    fn prerequisite(&self, kind: Kind, dataset: &Dataset) -> Result<PathBuf, CliError> {
        let dir = artifacts::latest(&self.root, kind)?;
        artifacts::check_fingerprint(&dir, kind, &dataset.fingerprint)?;
        Ok(dir)
    }
}

/// Training seed of a stage: the stage's derived seed mixed with the seed in its section.
fn stage_train(train: &TrainConfig, stage_seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(stage_seed, &[train.seed]),
        ..train.clone()
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))
}

fn report_training(what: &str, dir: &Path, log: &TrainLog) {
    println!(
        "{what}: {} epochs, best validation loss {:.6} at epoch {}{}",
        log.epochs.len(),
        log.best_validation_loss,
        log.best_epoch,
        if log.stopped_early { " (stopped early)" } else { "" }
    );
    println!("saved to {}", dir.display());
}

fn load_model(dir: &Path) -> Result<DenseNet, CliError> {
    Ok(DenseNet::load(&dir.join(MODEL_FILE))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Inputs {
    model: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    surrogate: Option<PathBuf>,
}

pub struct SyntheticArgs {
    pub dir: PathBuf,
    pub spec: SyntheticSpec,
}

/// Writes the synthetic dataset and a matching config file into `args.dir`.
pub fn generate(args: &SyntheticArgs) -> Result<(), CliError> {
    let data = synthetic_logistic(&args.spec)?;
    std::fs::create_dir_all(&args.dir).map_err(CliError::io(format!("cannot create {}", args.dir.display())))?;
    let csv_path = args.dir.join("synthetic.csv");
    let config_path = args.dir.join("fastshap.toml");
    for path in [&csv_path, &config_path] {
        if path.exists() {
            return Err(CliError::Validation(format!(
                "{} already exists; refusing to overwrite",
                path.display()
            )));
        }
    }
    let mut config = RunConfig {
        output_dir: Some(PathBuf::from("runs")),
        ..RunConfig::default()
    };
    config.dataset.path = PathBuf::from("synthetic.csv");
    config.dataset.label = data.schema.label.clone();
    config.dataset.features = data.schema.features.clone();
    let toml = toml::to_string(&config).map_err(|e| CliError::Validation(format!("cannot encode config: {e}")))?;
    artifacts::write(&args.dir, "synthetic.csv", &data.csv)?;
    artifacts::write(&args.dir, "fastshap.toml", &toml)?;
    println!("wrote {} and {}", csv_path.display(), config_path.display());
    Ok(())
}

pub fn train_model(ctx: &Context) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let mut config = ctx.config.model.clone();
    config.train = stage_train(&config.train, ctx.seed(Stage::Model));
    let (net, log) = train_classifier(&ds, &config)?;
    let test = &ds.split.test;
    let correct = test
        .iter()
        .filter(|&&i| argmax(&net.predict(&ds.features[i])) == ds.labels[i])
        .count();
    let accuracy = correct as f64 / test.len().max(1) as f64;

    let dir = artifacts::create_version(&ctx.root, Kind::Model)?;
    net.save(&dir.join(MODEL_FILE))?;
    artifacts::write(&dir, TRAINING_LOG, &to_json(&log)?)?;
    let settings = serde_json::json!({ "model": config, "test_accuracy": accuracy });
    artifacts::finish(&dir, Kind::Model.command(), &ctx.config, &settings, &ds.fingerprint)?;
    report_training("model", &dir, &log);
    println!("test accuracy {accuracy:.4}");
    Ok(())
}

/// Trains a surrogate of the latest model; the explanation surrogate samples
/// subsets from the Shapley kernel, the evaluation one uniformly.
pub fn train_masked_surrogate(ctx: &Context, kind: Kind) -> Result<(), CliError> {
    let (section, distribution, stage) = match kind {
        Kind::Surrogate => (
            &ctx.config.surrogate,
            SubsetDistribution::ShapleyKernel,
            Stage::Surrogate,
        ),
        Kind::EvalModel => (&ctx.config.eval_model, SubsetDistribution::Uniform, Stage::EvalModel),
        _ => unreachable!("only surrogate artifacts are trained here"),
    };
    let ds = ctx.dataset()?;
    let model_dir = ctx.prerequisite(Kind::Model, &ds)?;
    let model = load_model(&model_dir)?;
    let mut config = section.clone();
    config.train = stage_train(&config.train, ctx.seed(stage));
    let (surrogate, log) = train_surrogate(&model, &ds.train_rows(), &ds.validation_rows(), distribution, &config)?;

    let dir = artifacts::create_version(&ctx.root, kind)?;
    surrogate.save(&dir.join(SURROGATE_FILE))?;
    artifacts::write(&dir, TRAINING_LOG, &to_json(&log)?)?;
    let settings = serde_json::json!({
        "inputs": Inputs { model: model_dir, surrogate: None },
        "distribution": distribution,
        "surrogate": config,
    });
    artifacts::finish(&dir, kind.command(), &ctx.config, &settings, &ds.fingerprint)?;
    report_training(kind.dir_name(), &dir, &log);
    Ok(())
}

/// What an explainer was trained against, enough to rebuild its value functions.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExplainerSettings {
    inputs: Inputs,
    value_function: ValueFunctionKind,
    background_seed: u64,
    explainer: ExplainerManifest,
}

fn surrogate_for(dir: &Path, model_dir: &Path) -> Result<SurrogateModel, CliError> {
    let manifest = artifacts::read_manifest(dir)?;
    let trained_on = manifest
        .settings
        .get("inputs")
        .and_then(|i| i.get("model"))
        .and_then(|m| m.as_str());
    if trained_on != Some(&*model_dir.to_string_lossy()) {
        return Err(CliError::Validation(format!(
            "surrogate in {} was trained against a different model; rerun `fastshap train-surrogate`",
            dir.display()
        )));
    }
    Ok(SurrogateModel::load(&dir.join(SURROGATE_FILE))?)
}

pub fn train_explainer(ctx: &Context) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let model_dir = ctx.prerequisite(Kind::Model, &ds)?;
    let model: Arc<dyn Classifier> = Arc::new(load_model(&model_dir)?);
    let kind = ctx.config.explainer.value_function;
    let (surrogate_dir, surrogate) = if kind == ValueFunctionKind::Surrogate {
        let dir = ctx.prerequisite(Kind::Surrogate, &ds)?;
        let s = surrogate_for(&dir, &model_dir)?;
        (Some(dir), Some(Arc::new(s)))
    } else {
        (None, None)
    };
    let mut config: FastShapConfig = ctx.config.explainer.fastshap.clone();
    config.train = stage_train(&config.train, ctx.seed(Stage::Explainer));
    let background_seed = ctx.seed(Stage::Background);
    let builder = ValueFunctionBuilder::new(kind, config.link, model, surrogate, &ds, background_seed)?;
    let factory = |x: &[f64]| builder.build(x);
    let (explainer, log) = train_fastshap(&factory, &ds.train_rows(), &ds.validation_rows(), &config)?;

    let dir = artifacts::create_version(&ctx.root, Kind::Explainer)?;
    explainer.save(&dir.join(EXPLAINER_FILE))?;
    artifacts::write(&dir, TRAINING_LOG, &to_json(&log)?)?;
    let settings = ExplainerSettings {
        inputs: Inputs {
            model: model_dir,
            surrogate: surrogate_dir,
        },
        value_function: kind,
        background_seed,
        explainer: ExplainerManifest {
            value_function: kind.name().into(),
            config,
        },
    };
    artifacts::finish(&dir, Kind::Explainer.command(), &ctx.config, &settings, &ds.fingerprint)?;
    report_training("explainer", &dir, &log);
    Ok(())
}

/// A trained explainer with the model and value functions it was trained against.
struct LoadedExplainer {
    explainer: ExplainerNet,
    model: Arc<DenseNet>,
    builder: ValueFunctionBuilder,
    normalize: bool,
}

impl LoadedExplainer {
    fn load(ctx: &Context, ds: &Dataset) -> Result<Self, CliError> {
        let dir = ctx.prerequisite(Kind::Explainer, ds)?;
        let manifest = artifacts::read_manifest(&dir)?;
        let settings: ExplainerSettings = serde_json::from_value(manifest.settings)
            .map_err(|e| CliError::Validation(format!("corrupt explainer manifest in {}: {e}", dir.display())))?;
        let missing = |what: &str, path: &Path| {
            CliError::Validation(format!(
                "{what} {} used by the explainer in {} is gone; rerun `fastshap train-fastshap`",
                path.display(),
                dir.display()
            ))
        };
        let model_dir = &settings.inputs.model;
        if !model_dir.join(MODEL_FILE).is_file() {
            return Err(missing("model", model_dir));
        }
        let model = Arc::new(load_model(model_dir)?);
        let surrogate = match &settings.inputs.surrogate {
            Some(s) if !s.join(SURROGATE_FILE).is_file() => return Err(missing("surrogate", s)),
            Some(s) => Some(Arc::new(SurrogateModel::load(&s.join(SURROGATE_FILE))?)),
            None => None,
        };
        let config = &settings.explainer.config;
        let builder = ValueFunctionBuilder::new(
            settings.value_function,
            config.link,
            model.clone(),
            surrogate,
            ds,
            settings.background_seed,
        )?;
        Ok(Self {
            explainer: ExplainerNet::load(&dir.join(EXPLAINER_FILE))?,
            model,
            builder,
            normalize: config.normalize_inference,
        })
    }

    fn value_function(&self, x: &[f64]) -> Result<Arc<dyn ValueFunction>, CliError> {
        Ok(self.builder.build(x)?)
    }

    /// Explainer attribution for class `y`, with endpoints from the value function.
    fn attribute(&self, vf: &dyn ValueFunction, x: &[f64], y: usize) -> Result<Attribution, CliError> {
        let d = vf.dimension();
        let null = vf.evaluate_all(&SubsetMask::empty(d));
        let grand = vf.evaluate_all(&SubsetMask::full(d));
        if y >= null.len() {
            return Err(CliError::Validation(format!(
                "class {y} out of range for {} classes",
                null.len()
            )));
        }
        Ok(explain(&self.explainer, x, y, null[y], grand[y], self.normalize)?)
    }
}

pub enum InstanceSource {
    /// Row indices into the dataset.
    Indices(Vec<usize>),
    /// A delimited file of raw feature rows.
    File(PathBuf),
}

pub fn explain_instances(ctx: &Context, source: &InstanceSource, class: Option<usize>) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let loaded = LoadedExplainer::load(ctx, &ds)?;
    let rows: Vec<(usize, Vec<f64>)> = match source {
        InstanceSource::Indices(indices) => indices
            .iter()
            .map(|&i| {
                ds.features
                    .get(i)
                    .map(|x| (i, x.clone()))
                    .ok_or_else(|| CliError::Validation(format!("index {i} out of range for {} rows", ds.len())))
            })
            .collect::<Result<_, _>>()?,
        InstanceSource::File(path) => {
            let bytes = std::fs::read(path).map_err(CliError::io(format!("cannot read {}", path.display())))?;
            ds.parse_instances(&bytes)?.into_iter().enumerate().collect()
        }
    };
    if rows.is_empty() {
        return Err(CliError::Validation("no instances to explain".into()));
    }
    if let Some(c) = class {
        if c >= ds.num_classes() {
            return Err(CliError::Validation(format!(
                "class {c} out of range for {} classes",
                ds.num_classes()
            )));
        }
    }

    let explained: Vec<(usize, Attribution)> = rows
        .par_iter()
        .map(|(i, x)| {
            let y = class.unwrap_or_else(|| argmax(&loaded.model.predict(x)));
            let vf = loaded.value_function(x)?;
            Ok((*i, loaded.attribute(&*vf, x, y)?))
        })
        .collect::<Result<_, CliError>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["instance".to_string(), "class".to_string()];
    header.extend(ds.schema.names());
    header.extend(["null".to_string(), "grand".to_string()]);
    let csv_error = |e: csv::Error| CliError::Core(e.into());
    w.write_record(&header).map_err(csv_error)?;
    for (i, a) in &explained {
        let mut record = vec![i.to_string(), ds.class_names[a.class_index].clone()];
        record.extend(a.values.iter().map(f64::to_string));
        record.extend([a.null_value.to_string(), a.grand_value.to_string()]);
        w.write_record(&record).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Core(e.into_error().into()))?;
    let text = String::from_utf8(bytes).expect("csv output is utf-8");

    let dir = artifacts::create_version(&ctx.root, Kind::Explanations)?;
    artifacts::write(&dir, "attributions.csv", &text)?;
    let settings = serde_json::json!({
        "instances": rows.len(),
        "class": class,
        "source": match source {
            InstanceSource::Indices(i) => serde_json::json!({ "indices": i }),
            InstanceSource::File(p) => serde_json::json!({ "file": p }),
        },
    });
    artifacts::finish(
        &dir,
        Kind::Explanations.command(),
        &ctx.config,
        &settings,
        &ds.fingerprint,
    )?;
    print!("{text}");
    println!("saved to {}", dir.join("attributions.csv").display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct TruthRecord {
    instance: usize,
    class: usize,
    exact: bool,
    evaluations: usize,
    convergence_stat: f64,
    converged: bool,
}

pub fn benchmark(ctx: &Context) -> Result<(), CliError> {
    let settings = &ctx.config.benchmark;
    let ds = ctx.dataset()?;
    let loaded = LoadedExplainer::load(ctx, &ds)?;
    let seed = ctx.seed(Stage::Benchmark);
    let rows: Vec<Vec<f64>> = ds.test_rows().into_iter().take(settings.instances).collect();
    let d = ds.num_features();
    let exact = d <= settings.exact_max_features;

    let prepared: Vec<(BenchmarkInstance, Attribution, TruthRecord)> = rows
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let y = argmax(&loaded.model.predict(x));
            let vf = loaded.value_function(x)?;
            let cost = vf.cost_per_evaluation();
            let fast = loaded.attribute(&*vf, x, y)?;
            let game = game_for_class(vf, y)?;
            let (truth, record) = if exact {
                let truth = shapley_brute_force(&game)?;
                let record = TruthRecord {
                    instance: i,
                    class: y,
                    exact: true,
                    evaluations: 1 << d,
                    convergence_stat: 0.0,
                    converged: true,
                };
                (truth, record)
            } else {
                let r = ground_truth(&game, &settings.ground_truth, &mut derive(seed, &[0x67, i as u64]))?;
                let record = TruthRecord {
                    instance: i,
                    class: y,
                    exact: false,
                    evaluations: r.evaluations_used,
                    convergence_stat: r.convergence_stat,
                    converged: r.converged,
                };
                (r.attribution, record)
            };
            let instance = BenchmarkInstance {
                game,
                truth,
                cost_per_evaluation: cost,
            };
            Ok((instance, fast, record))
        })
        .collect::<Result<_, CliError>>()?;

    let records: Vec<TruthRecord> = prepared.iter().map(|(_, _, r)| r.clone()).collect();
    let (instances, fast): (Vec<BenchmarkInstance>, Vec<Attribution>) = prepared
        .into_iter()
        .filter(|(_, _, r)| r.converged)
        .map(|(b, f, _)| (b, f))
        .unzip();
    let excluded = records.len() - instances.len();
    if instances.is_empty() {
        return Err(CliError::Validation(
            "no instance reached a converged ground truth; raise [benchmark.ground_truth] max_evaluations".into(),
        ));
    }
    let report = accuracy_benchmark(&instances, &settings.methods, &settings.budgets, Some(&fast), seed)?;

    let dir = artifacts::create_version(&ctx.root, Kind::Benchmark)?;
    artifacts::write(&dir, "accuracy.csv", &accuracy_csv(&report)?)?;
    artifacts::write(&dir, "crossover.csv", &crossover_csv(&report)?)?;
    artifacts::write(&dir, "ground_truth.json", &to_json(&records)?)?;
    let manifest_settings = serde_json::json!({
        "benchmark": settings,
        "instances": records.len(),
        "excluded_unconverged": excluded,
        "exact_ground_truth": exact,
    });
    artifacts::finish(
        &dir,
        Kind::Benchmark.command(),
        &ctx.config,
        &manifest_settings,
        &ds.fingerprint,
    )?;
    for c in &report.crossovers {
        let budget = c
            .budget
            .map_or_else(|| "beyond the budget grid".to_string(), |b| format!("{b} evaluations"));
        println!(
            "{}: matches the explainer (l2 {:.5}) at {budget}",
            c.method, c.fastshap_l2
        );
    }
    if excluded > 0 {
        println!("{excluded} instance(s) excluded: ground truth did not converge");
    }
    println!("saved to {}", dir.display());
    Ok(())
}

pub fn auc(ctx: &Context) -> Result<(), CliError> {
    let settings = &ctx.config.auc;
    let ds = ctx.dataset()?;
    let loaded = LoadedExplainer::load(ctx, &ds)?;
    let eval_dir = ctx.prerequisite(Kind::EvalModel, &ds)?;
    let eval_model = SurrogateModel::load(&eval_dir.join(SURROGATE_FILE))?;
    let rows: Vec<Vec<f64>> = ds.test_rows().into_iter().take(settings.instances).collect();
    let labels = predicted_labels(&*loaded.model, &rows);
    let attributions: Vec<Vec<f64>> = rows
        .par_iter()
        .zip(&labels)
        .map(|(x, &y)| {
            let vf = loaded.value_function(x)?;
            Ok(loaded.attribute(&*vf, x, y)?.values)
        })
        .collect::<Result<_, CliError>>()?;

    let fractions = fraction_grid(settings.grid_points);
    let seed = ctx.seed(Stage::Auc);
    let mut results = Vec::new();
    for &metric in &settings.metrics {
        let fast = inclusion_exclusion(&attributions, &eval_model, &rows, &labels, &fractions, metric)?;
        let random = random_ranking_baseline(
            &eval_model,
            &rows,
            &labels,
            &fractions,
            metric,
            settings.random_rankings,
            seed,
        )?;
        println!(
            "{}: inclusion auc {:.4} (random {:.4}), exclusion auc {:.4} (random {:.4})",
            metric.name(),
            fast.inclusion_auc,
            random.inclusion_auc,
            fast.exclusion_auc,
            random.exclusion_auc
        );
        results.push(("fastshap".to_string(), fast));
        results.push(("random".to_string(), random));
    }

    let dir = artifacts::create_version(&ctx.root, Kind::Auc)?;
    artifacts::write(&dir, "auc.csv", &auc_csv(&results)?)?;
    let manifest_settings = serde_json::json!({
        "auc": settings,
        "eval_model": eval_dir,
        "instances": rows.len(),
    });
    artifacts::finish(
        &dir,
        Kind::Auc.command(),
        &ctx.config,
        &manifest_settings,
        &ds.fingerprint,
    )?;
    println!("saved to {}", dir.display());
    Ok(())
}
