use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use credence_core::estimator::fit_all;
use credence_core::event::{load_events, load_topics, save_events};
use credence_core::prediction::{
    run_acceptance_task, run_recovery, run_removal_task, AcceptanceReport, Baseline, RemovalReport,
};
use credence_core::report::parameter_report;
use credence_core::simulator::{generate_synthetic_corpus, TrueParams};
use credence_core::{Dataset, ParamsFile, TopicWeights};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Task};
use crate::{CliError, Command};

struct Run<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    provenance: Value,
}

pub(crate) fn dispatch(command: Command, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let effective = cfg.to_toml()?;
    let hash = Sha256::digest(effective.as_bytes());
    let hex: String = hash.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    let provenance = json!({
        "command": command.name(),
        "config_sha256": hex,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "time_unit": cfg.time_unit,
    });
    fs::create_dir_all(out)
        .map_err(|e| CliError::Validation(format!("output directory {}: {e}", out.display())))?;
    let run = Run {
        cfg,
        out,
        provenance,
    };
    run.write_text("config.toml", &effective)?;
    match command {
        Command::Simulate => run.simulate(),
        Command::Fit => run.fit(),
        Command::Predict => run.predict(),
        Command::Recover => run.recover(),
        Command::Report => run.report(),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("writing {}: {e}", path.display()))
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    /// Writes `body` wrapped with the provenance block.
    fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<(), CliError> {
        let mut value = serde_json::to_value(body).map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Value::Object(map) = &mut value {
            map.insert("provenance".into(), self.provenance.clone());
        } else {
            value = json!({ "provenance": self.provenance, "result": value });
        }
        let mut text =
            serde_json::to_string_pretty(&value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    fn require_seed(&self, what: &str) -> Result<u64, CliError> {
        self.cfg.seed.ok_or_else(|| {
            CliError::Validation(format!(
                "{what} requires a seed (--seed or `seed` in the config)"
            ))
        })
    }

    fn events(&self) -> Result<Dataset, CliError> {
        let path = self
            .cfg
            .input
            .events
            .as_ref()
            .ok_or_else(|| CliError::Validation("input.events is required".into()))?;
        let (ds, report) = load_events(path, &self.cfg.input.schema)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if report.rejected > 0 {
            log::warn!(
                "{} record(s) rejected while loading {}",
                report.rejected,
                path.display()
            );
        }
        log::info!(
            "loaded {} events ({} censored)",
            report.loaded,
            report.censored
        );
        Ok(ds)
    }

    fn topics(&self) -> Result<TopicWeights, CliError> {
        let n = self.cfg.input.n_topics;
        match &self.cfg.input.topics {
            Some(path) => load_topics(path, n)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display()))),
            None if n > 1 => Err(CliError::Validation(format!(
                "input.n_topics = {n} requires input.topics"
            ))),
            None => Ok(TopicWeights::uniform(n)?),
        }
    }

    fn simulate(&self) -> Result<(), CliError> {
        let seed = self.require_seed("simulate")?;
        let mut syn =
            self.cfg.simulate.clone().ok_or_else(|| {
                CliError::Validation("simulate requires a [simulate] section".into())
            })?;
        syn.seed = seed;
        let (ds, truth) = generate_synthetic_corpus(&syn)?;

        let mut header = serde_json::Map::new();
        header.insert("provenance".into(), self.provenance.clone());
        let trace = self.path("trace.jsonl");
        save_events(&ds, &trace, Some(&header)).map_err(|e| io_err(&trace, e))?;

        let mut file = truth.model.to_file(true);
        file.provenance = Some(self.provenance.clone());
        let truth_path = self.path("truth.json");
        file.write(&truth_path)
            .map_err(|e| io_err(&truth_path, e))?;

        let topics_path = self.path("topics.jsonl");
        let mut topics = fs::File::create(&topics_path).map_err(|e| io_err(&topics_path, e))?;
        for d in &truth.model.items {
            writeln!(topics, "{}", json!({ "item": d.id, "w": d.w }))
                .map_err(|e| io_err(&topics_path, e))?;
        }

        let events = ds.n_events();
        let evaluated = ds.n_evaluated();
        let summary = json!({
            "items": ds.items().len(),
            "sources": ds.n_sources(),
            "events": events,
            "evaluations": evaluated,
            "censoring_rate": if events > 0 { 1.0 - evaluated as f64 / events as f64 } else { 0.0 },
            "polarity": ds.polarity(),
            "horizon": ds.horizon(),
        });
        self.write_json("summary.json", &summary)?;
        println!(
            "simulated {} items, {} sources, {} events, {} evaluations",
            ds.items().len(),
            ds.n_sources(),
            events,
            evaluated
        );
        Ok(())
    }

    fn fit(&self) -> Result<(), CliError> {
        let ds = self.events()?;
        let topics = self.topics()?;
        let (params, summary) = fit_all(&ds, &topics, &self.cfg.fit)?;
        for (name, r) in [
            ("addition", &summary.addition),
            ("evaluation", &summary.evaluation),
        ] {
            if !r.converged {
                log::warn!("{name} fit did not converge in {} iterations", r.iterations);
            }
        }
        let mut file = params.to_file(false);
        file.provenance = Some(self.provenance.clone());
        let path = self.path("params.json");
        file.write(&path).map_err(|e| io_err(&path, e))?;
        self.write_json("fit_report.json", &summary)?;
        println!(
            "fitted {} items, {} sources; log-likelihood {:.6}, eta {}",
            params.items.len(),
            params.sources.len(),
            summary.total_loglik,
            params.eta
        );
        Ok(())
    }

    fn predict(&self) -> Result<(), CliError> {
        let ds = self.events()?;
        let topics = self.topics()?;
        match self.cfg.predict.task {
            Task::Removal => {
                let report =
                    run_removal_task(&ds, &topics, &self.cfg.fit, &self.cfg.predict.removal)?;
                self.write_json("metrics.json", &report)?;
                self.write_text(
                    "metrics.csv",
                    &removal_csv(&report, &self.cfg.predict.removal.baselines),
                )?;
                println!(
                    "removal task: {} test statements, {} windows",
                    report.n_test,
                    report.windows.len()
                );
            }
            Task::Acceptance => {
                let report =
                    run_acceptance_task(&ds, &topics, &self.cfg.fit, &self.cfg.predict.acceptance)?;
                self.write_json("metrics.json", &report)?;
                self.write_text(
                    "metrics.csv",
                    &acceptance_csv(&report, &self.cfg.predict.acceptance.baselines),
                )?;
                println!(
                    "acceptance task: {} training fractions",
                    report.fractions.len()
                );
            }
        }
        Ok(())
    }

    fn recover(&self) -> Result<(), CliError> {
        let seed = self.require_seed("recover")?;
        let (ds, truth) = match &self.cfg.input.truth {
            Some(path) => {
                let file = ParamsFile::read(path)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
                let truth_seed = file
                    .provenance
                    .as_ref()
                    .and_then(|p| p.get("seed"))
                    .and_then(Value::as_u64);
                match truth_seed {
                    Some(s) if s == seed => {}
                    Some(s) => return Err(CliError::Validation(format!(
                        "ground truth was simulated with seed {s}, but this run uses seed {seed}"
                    ))),
                    None => {
                        return Err(CliError::Validation(format!(
                            "{} carries no simulation seed",
                            path.display()
                        )))
                    }
                }
                let ds = self.events()?.reindex_sources(&file.model.source_ids());
                let truth = TrueParams {
                    model: file.model,
                    seed,
                    item_sources: Vec::new(),
                };
                (ds, truth)
            }
            None => {
                let mut syn = self.cfg.simulate.clone().ok_or_else(|| {
                    CliError::Validation("recover needs input.truth or a [simulate] section".into())
                })?;
                syn.seed = seed;
                generate_synthetic_corpus(&syn)?
            }
        };
        let report = run_recovery(&ds, &truth, &self.cfg.fit, &self.cfg.recover)?;
        self.write_json("rmse.json", &report)?;
        self.write_text("rmse.csv", &report.to_csv())?;
        println!("recovery over {} corpus sizes", report.rows.len());
        Ok(())
    }

    fn report(&self) -> Result<(), CliError> {
        let path = self
            .cfg
            .input
            .params
            .as_ref()
            .ok_or_else(|| CliError::Validation("input.params is required".into()))?;
        let file = ParamsFile::read(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let report = parameter_report(&file.model, &self.cfg.report);
        self.write_json("report.json", &report)?;
        for h in [&report.alpha, &report.gamma, &report.beta, &report.phi] {
            self.write_text(&format!("hist_{}.csv", h.name), &h.to_csv())?;
        }
        self.write_text("joint_beta_phi.csv", &report.joint.to_csv())?;
        for (i, s) in report.series.iter().enumerate() {
            self.write_text(&format!("series_{i}.csv"), &s.to_csv())?;
        }
        if !report.ranking.is_empty() {
            let mut csv = String::from("rank,source,probability\n");
            for (i, r) in report.ranking.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{}", i + 1, r.source, r.probability);
            }
            self.write_text("ranking.csv", &csv)?;
        }
        println!(
            "report over {} sources and {} items",
            file.model.sources.len(),
            file.model.items.len()
        );
        Ok(())
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn removal_csv(r: &RemovalReport, baselines: &[Baseline]) -> String {
    let mut s = String::from("window,positives,negatives");
    for b in baselines {
        s.push(',');
        s.push_str(b.as_str());
    }
    s.push('\n');
    for (i, w) in r.windows.iter().enumerate() {
        let _ = write!(s, "{},{},{}", w.window, w.positives, w.negatives);
        for b in baselines {
            let _ = write!(s, ",{}", cell(r.value(i, *b)));
        }
        s.push('\n');
    }
    s
}

fn acceptance_csv(r: &AcceptanceReport, baselines: &[Baseline]) -> String {
    let mut s = String::from("fraction,questions,chance");
    for b in baselines {
        s.push(',');
        s.push_str(b.as_str());
    }
    s.push('\n');
    for (i, f) in r.fractions.iter().enumerate() {
        let _ = write!(s, "{},{},{}", f.fraction, f.questions, f.chance);
        for b in baselines {
            let _ = write!(s, ",{}", cell(r.value(i, *b)));
        }
        s.push('\n');
    }
    s
}
