use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use discrepancy::bias_lab::{self, DistPair, Metric, ReluReversalConfig};
use discrepancy::estimators::{kid, mmd2_biased, mmd2_block_average, mmd2_unbiased, KID_REPS};
use discrepancy::gradnet::{finite_diff_check_seeded, NetSpec};
use discrepancy::relative::{
    lr_controller_step, relative_similarity_test, AdaptationConfig, AdaptationState, VarianceMethod,
};
use discrepancy::scores::{fid_estimate, inception_score};
use discrepancy::{FeatureMatrix, KernelSpec, RngState};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::features::{load_features, save_features, Format};
use crate::kernel_arg::{kernel_string, KernelArg};
use crate::{Cli, Command, Experiment, KernelFlags, MetricArg, OutputFormat, PairArg, VarianceArg};

#[derive(Debug, Serialize)]
struct Report {
    command: String,
    params: BTreeMap<String, Value>,
    result: Value,
    version: &'static str,
}

enum Output {
    Json(Report),
    Text(String),
}

pub(crate) fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Mmd { .. } => "mmd",
        Command::Kid { .. } => "kid",
        Command::Fid { .. } => "fid",
        Command::InceptionScore { .. } => "inception-score",
        Command::RelativeTest { .. } => "relative-test",
        Command::LrAdapt { .. } => "lr-adapt",
        Command::BiasDemo { .. } => "bias-demo",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Convert { .. } => "convert",
    }
}

fn experiment_name(e: &Experiment) -> &'static str {
    match e {
        Experiment::Wasserstein { .. } => "wasserstein",
        Experiment::MaxMmd { .. } => "max-mmd",
        Experiment::ScoreCurves { .. } => "score-curves",
        Experiment::FidReversal1d { .. } => "fid-reversal-1d",
        Experiment::FidReversalRelu { .. } => "fid-reversal-relu",
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

struct Params(BTreeMap<String, Value>);

impl Params {
    fn new() -> Self {
        Self(BTreeMap::new())
    }

    fn set(&mut self, key: &str, v: impl Serialize) -> &mut Self {
        self.0.insert(key.to_string(), to_value(&v));
        self
    }

    fn path(&mut self, key: &str, p: &Path) -> &mut Self {
        self.set(key, p.display().to_string())
    }
}

fn report(command: &str, params: Params, result: Value) -> Output {
    Output::Json(Report {
        command: command.to_string(),
        params: params.0,
        result,
        version: env!("CARGO_PKG_VERSION"),
    })
}

fn rng_for(cli: &Cli, command: &str) -> Result<RngState, CliError> {
    cli.seed
        .map(|s| RngState::new(s, 0))
        .ok_or_else(|| usage(format!("{command} is randomized and needs --seed")))
}

fn load(p: &Path) -> Result<FeatureMatrix, CliError> {
    Ok(load_features(p, None)?)
}

fn kernel(flags: &KernelFlags, default: &str, dim: usize) -> Result<KernelSpec, CliError> {
    KernelArg::from_flags(
        flags.kernel.as_deref(),
        flags.sigmas.as_deref(),
        flags.alphas.as_deref(),
        flags.beta,
        default,
    )?
    .build(dim)
}

pub(crate) fn execute(cli: &Cli, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<(), CliError> {
    if cli.output == OutputFormat::Csv && !matches!(cli.command, Command::BiasDemo { .. }) {
        return Err(usage("--output csv is only available for bias-demo"));
    }
    if let Command::LrAdapt { .. } = cli.command {
        // Sequential and possibly streaming, so it runs on this thread.
        return lr_adapt(cli, stdin, stdout);
    }
    let out = match cli.threads {
        None => compute(cli)?,
        Some(0) => return Err(usage("--threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| usage(format!("cannot start {n} threads: {e}")))?
            .install(|| compute(cli))?,
    };
    match out {
        Output::Json(r) => {
            serde_json::to_writer_pretty(&mut *stdout, &r).map_err(std::io::Error::from)?;
            writeln!(stdout)?;
        }
        Output::Text(t) => write!(stdout, "{t}")?,
    }
    Ok(())
}

fn compute(cli: &Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Mmd {
            pair,
            kernel: kf,
            biased,
            block,
            reps,
        } => {
            let (x, y) = (load(&pair.x)?, load(&pair.y)?);
            let spec = kernel(kf, "rq", x.cols())?;
            let mut p = Params::new();
            p.path("x", &pair.x).path("y", &pair.y).set("kernel", kernel_string(&spec));
            let est = if let Some(b) = block {
                let reps = reps.unwrap_or(KID_REPS);
                let mut rng = rng_for(cli, "mmd --block")?;
                p.set("estimator", "block").set("block", b).set("reps", reps).set("seed", cli.seed);
                mmd2_block_average(&spec, &x, &y, *b, reps, &mut rng)?
            } else if *biased {
                p.set("estimator", "biased");
                mmd2_biased(&spec, &x, &y)?
            } else {
                p.set("estimator", "unbiased");
                mmd2_unbiased(&spec, &x, &y)?
            };
            Ok(report("mmd", p, to_value(&est)))
        }
        Command::Kid { pair, block, reps } => {
            let (x, y) = (load(&pair.x)?, load(&pair.y)?);
            let mut rng = rng_for(cli, "kid")?;
            let block = block.map(|b| if b == 0 { x.rows().min(y.rows()) } else { b });
            let est = kid(&x, &y, block, *reps, &mut rng)?;
            let mut p = Params::new();
            p.path("x", &pair.x)
                .path("y", &pair.y)
                .set("kernel", kernel_string(&KernelSpec::kid(x.cols())))
                .set("block", est.estimate.block_size)
                .set("reps", est.estimate.reps)
                .set("seed", cli.seed);
            Ok(report("kid", p, to_value(&est)))
        }
        Command::Fid { pair } => {
            let (x, y) = (load(&pair.x)?, load(&pair.y)?);
            let fd = fid_estimate(&x, &y)?;
            if fd.clamped {
                log::warn!("small negative FID from round-off was clamped to 0");
            }
            let mut p = Params::new();
            p.path("x", &pair.x).path("y", &pair.y);
            Ok(report("fid", p, to_value(&fd)))
        }
        Command::InceptionScore { probs } => {
            let v = inception_score(&load(probs)?)?;
            let mut p = Params::new();
            p.path("probs", probs);
            Ok(report("inception-score", p, json!({ "value": v })))
        }
        Command::RelativeTest {
            candidate,
            baseline,
            reference,
            kernel: kf,
            variance,
        } => {
            let (c, b, r) = (load(candidate)?, load(baseline)?, load(reference)?);
            let spec = kernel(kf, "rq", c.cols())?;
            let mut rng = rng_for(cli, "relative-test")?;
            let method = match variance {
                VarianceArg::Complete => VarianceMethod::Complete,
                VarianceArg::Projection => VarianceMethod::Projection,
            };
            let res = relative_similarity_test(&spec, &c, &b, &r, &mut rng, method)?;
            let mut p = Params::new();
            p.path("candidate", candidate)
                .path("baseline", baseline)
                .path("reference", reference)
                .set("kernel", kernel_string(&spec))
                .set("variance", method)
                .set("seed", cli.seed);
            Ok(report("relative-test", p, to_value(&res)))
        }
        Command::BiasDemo { experiment } => bias_demo(cli, experiment),
        Command::Gradcheck {
            widths,
            generator,
            kernel: kf,
            eps,
            m,
            n,
            max_retries,
        } => {
            let mut rng = rng_for(cli, "gradcheck")?;
            let critic = NetSpec::mlp(widths, &mut rng)?;
            let gen = generator.as_deref().map(|w| NetSpec::mlp(w, &mut rng)).transpose()?;
            let spec = kernel(kf, "rq", critic.output_dim())?;
            let out = finite_diff_check_seeded(&critic, gen.as_ref(), &spec, *m, *n, *eps, *max_retries, &mut rng)?;
            let mut p = Params::new();
            p.set("widths", widths)
                .set("generator", generator)
                .set("kernel", kernel_string(&spec))
                .set("eps", eps)
                .set("m", m)
                .set("n", n)
                .set("seed", cli.seed);
            Ok(report("gradcheck", p, to_value(&out)))
        }
        Command::Convert { from, to } => {
            let x = load(from)?;
            let format = Format::from_extension(to)
                .ok_or_else(|| usage(format!("{}: output extension must be .csv, .fmat or .bin", to.display())))?;
            save_features(to, &x, format)?;
            let mut p = Params::new();
            p.path("from", from).path("to", to);
            Ok(report("convert", p, json!({ "rows": x.rows(), "cols": x.cols() })))
        }
        Command::LrAdapt { .. } => unreachable!("handled before dispatch"),
    }
}

fn bias_demo(cli: &Cli, experiment: &Experiment) -> Result<Output, CliError> {
    let name = experiment_name(experiment);
    let mut rng = rng_for(cli, &format!("bias-demo {name}"))?;
    let rep = match experiment {
        Experiment::Wasserstein { reps } => bias_lab::wasserstein_splitting_bias(*reps, &mut rng)?,
        Experiment::MaxMmd { m_tr, n_tr, reps } => bias_lab::max_mmd_splitting_bias(*m_tr, *n_tr, *reps, &mut rng)?,
        Experiment::ScoreCurves {
            metric,
            dim,
            pair,
            offset,
            n_list,
            reps,
        } => {
            let metric = match metric {
                MetricArg::Kid => Metric::Kid,
                MetricArg::Fid => Metric::Fid,
            };
            let pair = match pair {
                PairArg::Same => DistPair::Same,
                PairArg::Shifted => DistPair::Shifted { offset: *offset },
            };
            bias_lab::score_bias_curves(metric, *dim, pair, n_list, *reps, &mut rng)?
        }
        Experiment::FidReversal1d { m, reps } => bias_lab::fid_ordering_reversal_1d(*m, *reps, &mut rng)?,
        Experiment::FidReversalRelu {
            dim,
            m_list,
            reps,
            mc_samples,
            batches,
        } => {
            let cfg = ReluReversalConfig {
                d: *dim,
                m_list: m_list.clone(),
                reps: *reps,
                mc_samples: *mc_samples,
                batches: *batches,
            };
            bias_lab::fid_ordering_reversal_relu(&cfg, &mut rng)?
        }
    };
    if cli.output == OutputFormat::Csv {
        return Ok(Output::Text(rep.to_csv()));
    }
    let mut p = Params::new();
    p.set("experiment", name).set("seed", cli.seed);
    Ok(report("bias-demo", p, to_value(&rep)))
}

#[derive(Serialize)]
struct Step {
    step: usize,
    p_value: f64,
    action: discrepancy::relative::Action,
    lr: f64,
    consecutive_failures: u32,
}

fn lr_adapt(cli: &Cli, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<(), CliError> {
    let Command::LrAdapt {
        input,
        lr,
        alpha,
        patience,
        decay,
        min_lr,
        stream,
    } = &cli.command
    else {
        unreachable!("called for lr-adapt only")
    };
    let config = AdaptationConfig {
        alpha: *alpha,
        patience: *patience,
        decay: *decay,
        min_lr: *min_lr,
    };
    let mut state = AdaptationState::new(*lr, config)?;
    let mut file_reader;
    let reader: &mut dyn BufRead = match input {
        Some(p) => {
            file_reader = BufReader::new(fs::File::open(p).map_err(|e| usage(format!("{}: {e}", p.display())))?);
            &mut file_reader
        }
        None => stdin,
    };
    let mut steps = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let p: f64 = text
            .parse()
            .map_err(|_| usage(format!("line {}: cannot parse {text:?} as a p-value", k + 1)))?;
        let (next, action) =
            lr_controller_step(&state, p).map_err(|e| usage(format!("line {}: {e}", k + 1)))?;
        state = next;
        let step = Step {
            step: steps.len() + 1,
            p_value: p,
            action,
            lr: state.lr,
            consecutive_failures: state.consecutive_failures,
        };
        if *stream {
            serde_json::to_writer(&mut *stdout, &step).map_err(std::io::Error::from)?;
            writeln!(stdout)?;
            stdout.flush()?;
        }
        steps.push(step);
    }
    if !*stream {
        let mut p = Params::new();
        p.set("lr", lr).set("config", config);
        if let Some(path) = input {
            p.path("input", path);
        }
        let r = Report {
            command: "lr-adapt".into(),
            params: p.0,
            result: json!({ "final_lr": state.lr, "steps": to_value(&steps) }),
            version: env!("CARGO_PKG_VERSION"),
        };
        serde_json::to_writer_pretty(&mut *stdout, &r).map_err(std::io::Error::from)?;
        writeln!(stdout)?;
    }
    Ok(())
}
