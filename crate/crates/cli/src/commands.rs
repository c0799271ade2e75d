//! The subcommands. Each writes its artifacts into a fresh run directory and returns it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use omnidistill::buffer::{build_buffer, load_buffer, save_buffer};
use omnidistill::datagen::{generate, read_dataset, write_dataset, OmniDataset, Split};
use omnidistill::distill::{distill, load_synthetic, log_csv, save_synthetic};
use omnidistill::eval::{evaluate_protocol, random_coreset_eval, TrainingSet};
use omnidistill::objectives::InnerObjective;
use omnidistill::theory::{
    comparison_holds, gradient_suite, run_trials, selectivity_suite, spectral_suite, trials_csv, TrialReport,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::run::{file_digest, RunDir};

pub const TRAIN_FILE: &str = "train.omds";
pub const TEST_FILE: &str = "test.omds";
pub const BUFFER_FILE: &str = "buffer.omtb";
pub const SYNTHETIC_FILE: &str = "synthetic.omss";
pub const DISTILL_LOG_FILE: &str = "distill_log.csv";
pub const REPORT_FILE: &str = "report.csv";

pub const GRADIENT_TOL: f64 = 1e-5;
pub const SELECTIVE_TAIL_TOL: f64 = 1e-8;
pub const FULL_SPECTRUM_TAIL_MIN: f64 = 1e-6;
/// Fraction of batches in which pairwise InfoNCE must show a higher-mode projection.
pub const FULL_SPECTRUM_MIN_FRACTION: f64 = 0.95;

/// Checks that an input exists and returns its provenance log line.
fn input_line(label: &str, path: &Path) -> Result<String, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{label} input {} does not exist", path.display())));
    }
    Ok(format!("input {label} {} sha256 {}", path.display(), file_digest(path)?))
}

fn load_input(label: &str, path: &Path) -> Result<(OmniDataset, String), CliError> {
    let line = input_line(label, path)?;
    Ok((read_dataset(path)?, line))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let train_cfg = cfg.generator(cfg.get("n_train")?)?;
    let test_cfg = cfg.generator(cfg.get("n_test")?)?;
    let mut run = RunDir::create(out, "gen-data", cfg)?;
    for (name, g, split) in [(TRAIN_FILE, &train_cfg, Split::Train), (TEST_FILE, &test_cfg, Split::Test)] {
        let ds = generate(g, split)?;
        write_dataset(&ds, &run.file(name))?;
        run.say(format!("{name}: {} instances, modalities {}", ds.n(), ds.names.join(",")));
        run.record_digest(name)?;
    }
    run.finish()
}

pub fn buffer(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let (ds, line) = load_input("data", data)?;
    let expert = cfg.expert(&ds.names)?;
    let mut run = RunDir::create(out, "buffer", cfg)?;
    run.say(line);
    let buffer = build_buffer(&ds, &expert)?;
    save_buffer(&buffer, &run.file(BUFFER_FILE))?;
    run.say(format!(
        "{BUFFER_FILE}: {} experts x {} epochs, objective of method {}",
        buffer.len(),
        expert.epochs,
        cfg.method()?
    ));
    run.record_digest(BUFFER_FILE)?;
    run.finish()
}

pub fn distill_cmd(cfg: &RunConfig, data: &Path, buffer: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let dcfg = cfg.distill()?;
    let (ds, data_line) = load_input("data", data)?;
    let buffer_line = input_line("buffer", buffer)?;
    let buf = load_buffer(buffer, ds.k())?;
    let mut run = RunDir::create(out, "distill", cfg)?;
    run.say(data_line);
    run.say(buffer_line);
    let (syn, log) = distill(&ds, &buf, &dcfg)?;
    save_synthetic(&syn, &run.file(SYNTHETIC_FILE))?;
    run.write(DISTILL_LOG_FILE, log_csv(dcfg.method, &log).as_bytes())?;
    let skipped = log.iter().filter(|r| r.skipped).count();
    let last = log.iter().rev().find(|r| !r.skipped).map_or(f64::NAN, |r| r.matching_loss);
    run.say(format!(
        "method {}: {} iterations ({skipped} skipped), final matching loss {last:.6e}, student lr {:.6e}",
        dcfg.method,
        log.len(),
        syn.student_lr
    ));
    run.record_digest(SYNTHETIC_FILE)?;
    run.record_digest(DISTILL_LOG_FILE)?;
    run.finish()
}

/// What `eval` trains its students on.
pub enum EvalSource<'a> {
    Synthetic(&'a Path),
    RandomCoreset { train: &'a Path },
}

pub fn eval(cfg: &RunConfig, source: EvalSource<'_>, test: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let ecfg = cfg.eval()?;
    let seeds: Vec<u64> = cfg.list("seeds")?;
    let (test_ds, test_line) = load_input("test", test)?;
    let source_line = match source {
        EvalSource::Synthetic(path) => input_line("synthetic", path)?,
        EvalSource::RandomCoreset { train } => input_line("train", train)?,
    };
    let mut run = RunDir::create(out, "eval", cfg)?;
    run.say(test_line);
    run.say(source_line);
    let report = match source {
        EvalSource::Synthetic(path) => {
            let syn = load_synthetic(path)?;
            let method = cfg.method()?;
            let objective = method.objective(&syn.names)?;
            run.say(format!("student objective: method {method}, {} synthetic instances", syn.n()));
            evaluate_protocol(TrainingSet::Synthetic(&syn), &test_ds, &objective, &ecfg, &seeds)?
        }
        EvalSource::RandomCoreset { train } => {
            let train_ds = read_dataset(train)?;
            let n: usize = cfg.get("n")?;
            run.say(format!("random coreset of {n}, student objective: hopa"));
            random_coreset_eval(&train_ds, &test_ds, n, &InnerObjective::hopa(), &ecfg, &seeds)?
        }
    };
    run.write(REPORT_FILE, report.to_csv().as_bytes())?;
    for (i, &k) in ecfg.ks.iter().enumerate() {
        run.say(format!(
            "Avg R@{k}: {:.3} ± {:.3}",
            report.mean.average[i], report.std.average[i]
        ));
    }
    run.record_digest(REPORT_FILE)?;
    run.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Lemma1,
    Spectrum,
    Theorem1,
    Gradients,
    All,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

fn ids(v: &[usize]) -> String {
    let shown: Vec<String> = v.iter().take(20).map(|i| i.to_string()).collect();
    let more = if v.len() > 20 { format!(" (+{} more)", v.len() - 20) } else { String::new() };
    format!("[{}]{more}", shown.join(","))
}

/// Runs the selected suites, writes their tables, and fails with exit code 3 naming
/// the failing checks or trial ids.
pub fn verify(cfg: &RunConfig, suite: Suite, out: &Path) -> Result<PathBuf, CliError> {
    let seed = cfg.seed()?;
    let trials: usize = cfg.get("trials")?;
    let desk = cfg.desk()?;
    let mut run = RunDir::create(out, "verify", cfg)?;
    let mut failures = Vec::new();

    if suite.includes(Suite::Gradients) {
        let instances: usize = cfg.get("gradient_instances")?;
        let checks = gradient_suite(instances, seed)?;
        let mut csv = String::from("check,instances,worst_rel_error,passed\n");
        for c in &checks {
            let ok = c.worst() <= GRADIENT_TOL;
            let _ = writeln!(csv, "{},{},{:e},{}", c.name, c.errors.len(), c.worst(), u8::from(ok));
            run.say(format!("gradients {}: worst rel error {:.3e} [{}]", c.name, c.worst(), pass(ok)));
            if !ok {
                let bad: Vec<usize> = (0..c.errors.len()).filter(|&i| c.errors[i] > GRADIENT_TOL).collect();
                failures.push(format!("gradients {} instances {}", c.name, ids(&bad)));
            }
        }
        run.write("gradients.csv", csv.as_bytes())?;
    }

    if suite.includes(Suite::Spectrum) {
        let candidates: usize = cfg.get("spectrum_candidates")?;
        let s = spectral_suite(trials, candidates, seed)?;
        let ok = s.passed == s.trials;
        run.write(
            "spectrum.csv",
            format!(
                "trials,worst_duality,worst_trace,eckart_young_violations,passed\n{},{:e},{:e},{},{}\n",
                s.trials, s.worst_duality, s.worst_trace, s.eckart_young_violations, s.passed
            )
            .as_bytes(),
        )?;
        run.say(format!(
            "spectrum: {}/{} instances, worst duality {:.3e}, worst trace {:.3e}, {} rank-1 candidates beat the proxy [{}]",
            s.passed,
            s.trials,
            s.worst_duality,
            s.worst_trace,
            s.eckart_young_violations,
            pass(ok)
        ));
        if !ok {
            failures.push(format!("spectrum {}/{} instances", s.passed, s.trials));
        }

        let sel = selectivity_suite(trials, seed)?;
        let mut csv = String::from("trial,modality_loss_tail,infonce_tail\n");
        for (i, t) in sel.iter().enumerate() {
            let _ = writeln!(csv, "{i},{:e},{:e}", t.modality_tail, t.infonce_tail);
        }
        run.write("selectivity.csv", csv.as_bytes())?;
        let leaky: Vec<usize> = (0..sel.len()).filter(|&i| sel[i].modality_tail > SELECTIVE_TAIL_TOL).collect();
        let full = sel.iter().filter(|t| t.infonce_tail > FULL_SPECTRUM_TAIL_MIN).count();
        let full_ok = full as f64 >= FULL_SPECTRUM_MIN_FRACTION * sel.len() as f64;
        run.say(format!(
            "selectivity: modality loss higher-mode tail <= {SELECTIVE_TAIL_TOL:e} in {}/{} [{}]; InfoNCE tail > {FULL_SPECTRUM_TAIL_MIN:e} in {full}/{} [{}]",
            sel.len() - leaky.len(),
            sel.len(),
            pass(leaky.is_empty()),
            sel.len(),
            pass(full_ok)
        ));
        if !leaky.is_empty() {
            failures.push(format!("selectivity modality-loss trials {}", ids(&leaky)));
        }
        if !full_ok {
            failures.push(format!("selectivity InfoNCE {full}/{}", sel.len()));
        }
    }

    if suite.includes(Suite::Lemma1) || suite.includes(Suite::Theorem1) {
        let reports = run_trials(&desk, trials, seed)?;
        run.write("trials.csv", trials_csv(&reports).as_bytes())?;
        if suite.includes(Suite::Lemma1) {
            check_trials(&mut run, &mut failures, "lemma1", &reports, |t| t.satisfied);
            let violations: usize = reports.iter().map(|t| t.model_violations.len()).sum();
            let steps: usize = reports.iter().map(|t| t.steps).sum();
            run.say(format!(
                "lemma1 diagnostic: spectral mismatch model under-estimated {violations}/{steps} steps"
            ));
        }
        if suite.includes(Suite::Theorem1) {
            check_trials(&mut run, &mut failures, "theorem1", &reports, comparison_holds);
        }
    }

    let dir = run.finish()?;
    if failures.is_empty() {
        Ok(dir)
    } else {
        Err(CliError::Verification(failures.join("; ")))
    }
}

fn check_trials(
    run: &mut RunDir,
    failures: &mut Vec<String>,
    name: &str,
    reports: &[TrialReport],
    ok: impl Fn(&TrialReport) -> bool,
) {
    let bad: Vec<usize> = reports.iter().filter(|t| !ok(t)).map(|t| t.trial).collect();
    run.say(format!(
        "{name}: satisfied in {}/{} trials [{}]",
        reports.len() - bad.len(),
        reports.len(),
        pass(bad.is_empty())
    ));
    if !bad.is_empty() {
        failures.push(format!("{name} trials {}", ids(&bad)));
    }
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
