//! Command-line entry point: dataset synthesis, training, generation,
//! evaluation and the gradient audit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use omgpt_core::config::RunConfig;
use omgpt_core::pipeline::{self, EvalMode, PipelineError};
use omgpt_core::skeleton;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE: &str = "\
omgpt — cross-skeleton text-to-motion generation

USAGE:
    omgpt data synth --spec <file> --out <dir>
    omgpt skeleton inspect <file>
    omgpt train --config <file> --out <dir> [--data <dir>] [--resume <checkpoint>]
    omgpt generate --checkpoint <dir> --text <caption> --animal <name>
                   --source-motion <file> --out <file>
    omgpt evaluate --checkpoint <dir> --dataset <dir> --mode <id|ood>
                   --report <file> [--feature-side <animal|human>]
    omgpt gradcheck [--config <file>]
    omgpt help [command]

Run `omgpt help <command>` for the flags of one command.
";

fn command_help(cmd: &str) -> String {
    match cmd {
        "data" => "\
omgpt data synth --spec <file> --out <dir>

Generate the paired human/animal text-motion datasets.
    --spec <file>   run configuration; the [data] section controls sizes
                    (defaults: 100 human and 40 animal clips per family,
                    six families, split 0.75, seed 7)
    --out <dir>     output directory; writes human_train/, human_test/,
                    animal_train/, animal_test/, correspondence.json
"
        .into(),
        "skeleton" => "\
omgpt skeleton inspect <file>

Print joints, parents, degrees, primal joints and end effectors of a
skeleton file (or the built-ins `builtin:smpl22`, `builtin:smal35`).
"
        .into(),
        "train" => "\
omgpt train --config <file> --out <dir> [--data <dir>] [--resume <ckpt>]

Joint training of both autoencoders plus the cross-domain objective.
    --config <file>  run configuration (defaults: 3000 steps, batch 16,
                     lr 1e-4, betas 0.9/0.999, ema decay 0.99, loss weights
                     1/1/0.1/1/100, translation weight 1)
    --out <dir>      checkpoints, loss_history.csv and the resolved config
    --data <dir>     dataset directory (overrides [paths] data)
    --resume <ckpt>  continue from a saved checkpoint
"
        .into(),
        "generate" => "\
omgpt generate --checkpoint <dir> --text <caption> --animal <name>
               --source-motion <file> --out <file>

Subject-swap the caption, encode the source clip and decode an animal
motion. Writes the motion file plus a joint-positions CSV next to it.
"
        .into(),
        "evaluate" => "\
omgpt evaluate --checkpoint <dir> --dataset <dir> --mode <id|ood>
               --report <file> [--feature-side <animal|human>]

Run the metric suite (fid, mm_dist, diversity, mmodality, r_precision
top-1/2/3), each metric over 20 seeded runs (mean and std in the report).
Mode `ood` subject-swaps human captions; `id` uses animal captions.
    --feature-side   which latent head maps motions into clip space
                     (default animal)
"
        .into(),
        "gradcheck" => "\
omgpt gradcheck [--config <file>]

Finite-difference audit of every tensor operation and every composite loss
on the toy two-skeleton setup (relative tolerance 1e-4 in 64-bit). Exits
non-zero when any check fails.
"
        .into(),
        _ => USAGE.into(),
    }
}

struct Flags {
    values: BTreeMap<String, String>,
    positional: Vec<String>,
}

fn parse_flags(args: &[String], allowed: &[&str]) -> Result<Flags, String> {
    let mut values = BTreeMap::new();
    let mut positional = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(name) = a.strip_prefix("--") {
            if !allowed.contains(&name) {
                return Err(format!("unknown flag --{name}"));
            }
            let v = args
                .get(i + 1)
                .ok_or_else(|| format!("--{name} needs a value"))?;
            values.insert(name.to_string(), v.clone());
            i += 2;
        } else {
            positional.push(a.clone());
            i += 1;
        }
    }
    Ok(Flags { values, positional })
}

impl Flags {
    fn require(&self, name: &str) -> Result<&str, String> {
        self.values
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| format!("missing required flag --{name}"))
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }
}

fn load_config(path: Option<&str>) -> Result<RunConfig, PipelineError> {
    match path {
        Some(p) => Ok(RunConfig::load(Path::new(p))?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_data_synth(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args, &["spec", "out"]).map_err(CliError::Usage)?;
    let cfg = load_config(flags.get("spec"))?;
    let out = PathBuf::from(flags.require("out").map_err(CliError::Usage)?);
    let paths = pipeline::synth(&cfg, &out)?;
    eprintln!(
        "wrote {}, {}, {}, {}",
        paths.human_train.display(),
        paths.human_test.display(),
        paths.animal_train.display(),
        paths.animal_test.display()
    );
    Ok(())
}

fn cmd_skeleton_inspect(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args, &[]).map_err(CliError::Usage)?;
    let target = flags
        .positional
        .first()
        .ok_or_else(|| CliError::Usage("skeleton inspect needs a file".into()))?;
    let g = match target.as_str() {
        "builtin:smpl22" => skeleton::smpl22(),
        "builtin:smal35" => skeleton::smal35(),
        path => skeleton::load_skeleton(Path::new(path)).map_err(PipelineError::from)?,
    };
    println!("skeleton {} with {} joints", g.name, g.joint_count());
    println!("{:<4} {:<22} {:<22} {:>6}", "id", "name", "parent", "degree");
    for j in 0..g.joint_count() {
        let parent = if g.parents[j] < 0 {
            "-".to_string()
        } else {
            g.joint_names[g.parents[j] as usize].clone()
        };
        println!(
            "{:<4} {:<22} {:<22} {:>6}",
            j,
            g.joint_names[j],
            parent,
            g.degree(j)
        );
    }
    let names = |ids: &[usize]| {
        ids.iter()
            .map(|&i| g.joint_names[i].as_str())
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!(
        "primal joints ({}): {}",
        g.primal_ids.len(),
        names(&g.primal_ids)
    );
    println!(
        "end effectors ({}): {}",
        g.end_effector_ids.len(),
        names(&g.end_effector_ids)
    );
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let flags =
        parse_flags(args, &["config", "out", "data", "resume"]).map_err(CliError::Usage)?;
    let cfg = load_config(flags.get("config"))?;
    let out = PathBuf::from(flags.require("out").map_err(CliError::Usage)?);
    let data_dir = match flags.get("data") {
        Some(d) => PathBuf::from(d),
        None => cfg.data_dir.clone().ok_or_else(|| {
            CliError::Usage("no dataset: pass --data or set [paths] data".into())
        })?,
    };
    let resume = flags.get("resume").map(PathBuf::from);
    let outcome = pipeline::train_run(&cfg, &data_dir, &out, resume.as_deref())?;
    if let Some(last) = outcome.last_components {
        eprintln!(
            "finished at step {} with L_total {:.6}",
            last.step + 1,
            last.total
        );
    }
    eprintln!("checkpoint: {}", outcome.final_checkpoint.display());
    eprintln!("loss history: {}", outcome.history.display());
    Ok(())
}

fn cmd_generate(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(
        args,
        &["checkpoint", "text", "animal", "source-motion", "out"],
    )
    .map_err(CliError::Usage)?;
    let ckpt = PathBuf::from(flags.require("checkpoint").map_err(CliError::Usage)?);
    let text = flags.require("text").map_err(CliError::Usage)?;
    let animal = flags.require("animal").map_err(CliError::Usage)?;
    let source = PathBuf::from(flags.require("source-motion").map_err(CliError::Usage)?);
    let out = PathBuf::from(flags.require("out").map_err(CliError::Usage)?);
    let res = pipeline::generate_run(&ckpt, text, animal, &source, &out)?;
    eprintln!("motion: {}", res.motion_path.display());
    eprintln!("positions: {}", res.positions_path.display());
    Ok(())
}

fn cmd_evaluate(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(
        args,
        &["checkpoint", "dataset", "mode", "report", "feature-side"],
    )
    .map_err(CliError::Usage)?;
    let ckpt = PathBuf::from(flags.require("checkpoint").map_err(CliError::Usage)?);
    let dataset = PathBuf::from(flags.require("dataset").map_err(CliError::Usage)?);
    let mode_s = flags.require("mode").map_err(CliError::Usage)?;
    let mode = EvalMode::parse(mode_s)
        .ok_or_else(|| CliError::Usage(format!("mode must be id or ood, got `{mode_s}`")))?;
    let report = PathBuf::from(flags.require("report").map_err(CliError::Usage)?);
    let side = match flags.get("feature-side") {
        None => None,
        Some("animal") => Some(false),
        Some("human") => Some(true),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "feature-side must be animal or human, got `{other}`"
            )))
        }
    };
    let rep = pipeline::evaluate_run(&ckpt, &dataset, mode, &report, side)?;
    for (name, stat) in &rep.metrics {
        println!("{name}: {:.4} +/- {:.4}", stat.mean, stat.std);
    }
    eprintln!("report: {}", report.display());
    Ok(())
}

fn cmd_gradcheck(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args, &["config"]).map_err(CliError::Usage)?;
    // the audit fixture is the toy setup; the config is validated only
    let _ = load_config(flags.get("config"))?;
    let reports = omgpt_core::gradcheck::run_audit(60, 1e-4);
    let mut failed = 0;
    for r in &reports {
        let status = if r.pass() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<28} worst rel {:.3e} over {} probes",
            r.name, r.worst_rel, r.checked
        );
        if !r.pass() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!(
            "{failed} of {} gradient checks failed",
            reports.len()
        )));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

enum CliError {
    Usage(String),
    Pipeline(PipelineError),
    Numeric(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

fn dispatch(cmd: &str, rest: &[String]) -> Result<(), CliError> {
    match cmd {
        "data" => match rest.first().map(|s| s.as_str()) {
            Some("synth") => cmd_data_synth(&rest[1..]),
            _ => Err(CliError::Usage("data supports: synth".into())),
        },
        "skeleton" => match rest.first().map(|s| s.as_str()) {
            Some("inspect") => cmd_skeleton_inspect(&rest[1..]),
            _ => Err(CliError::Usage("skeleton supports: inspect".into())),
        },
        "train" => cmd_train(rest),
        "generate" => cmd_generate(rest),
        "evaluate" => cmd_evaluate(rest),
        "gradcheck" => cmd_gradcheck(rest),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = args.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    };
    if cmd == "help" || cmd == "--help" || cmd == "-h" {
        print!(
            "{}",
            command_help(args.get(1).map(|s| s.as_str()).unwrap_or(""))
        );
        return ExitCode::SUCCESS;
    }
    match dispatch(cmd, &args[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
        Err(CliError::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
