use std::net::TcpListener;
use std::sync::Arc;

use seqmc::config::{resolve, ExperimentConfig, Overrides};
use seqmc::experiment::{aggregate, run_experiment, Stat};
use seqmc::export::{export_traces, import_traces, split_chains, ExportMeta, Format};
use seqmc::run::{create_run_dir, write_run};
use seqmc_core::energy::{LogitRow, Scorer};
use seqmc_core::sampler::{chain_rng, run_chain, SamplerConfig, SamplerKind};
use seqmc_core::seq::{MaskedView, Vocab};
use seqmc_core::{EnergyKind, TabularMlm};

fn config(o: Overrides) -> ExperimentConfig {
    resolve(None, |_| None, &o).unwrap()
}

fn zero_model_file(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("zeros.sqmc");
    TabularMlm::zeros(3, 3).unwrap().save(&path).unwrap();
    path
}

#[test]
fn zero_model_accepts_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Overrides {
        model_file: Some(zero_model_file(dir.path())),
        chains: Some(5),
        epochs: Some(207),
        burn_in: Some(7),
        ..Overrides::default()
    });
    let r = run_experiment(&cfg).unwrap().report;
    assert_eq!(r.acceptance_rate, Stat { mean: 1.0, std: 0.0 });
    // each step proposes a uniform token, which differs from the current one
    // with probability 2/3
    let n: usize = r.chains.iter().map(|c| c.counted_steps).sum();
    assert_eq!(n, 5 * 200 * 3);
    let pooled = r.chains.iter().map(|c| c.novel_rate * c.counted_steps as f64).sum::<f64>() / n as f64;
    let p = 2.0 / 3.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((pooled - p).abs() <= 3.0 * sigma, "{pooled}");
}

#[test]
fn deg_gibbs_acceptance_is_exactly_one() {
    let r = run_experiment(&config(Overrides {
        sampler: Some(SamplerKind::DegGibbs),
        chains: Some(5),
        ..Overrides::default()
    }))
    .unwrap()
    .report;
    assert_eq!(r.acceptance_rate.mean, 1.0);
    assert_eq!(r.acceptance_rate.std, 0.0);
}

#[test]
fn reports_are_deterministic() {
    let cfg = config(Overrides {
        chains: Some(2),
        master_seed: Some(11),
        parallelism: Some(2),
        ..Overrides::default()
    });
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.traces, b.traces);

    let root = tempfile::tempdir().unwrap();
    let da = create_run_dir(root.path(), &a.report.config_hash).unwrap();
    let db = create_run_dir(root.path(), &b.report.config_hash).unwrap();
    assert_ne!(da, db);
    write_run(&da, &cfg, &a).unwrap();
    write_run(&db, &cfg, &b).unwrap();
    for f in ["trace.csv", "report.json", "samples.csv", "config.toml", "target.csv"] {
        assert_eq!(
            std::fs::read(da.join(f)).unwrap(),
            std::fs::read(db.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn exported_records_reproduce_the_report() {
    for format in [Format::Csv, Format::Jsonl] {
        for include_burn_in in [false, true] {
            let mut cfg = config(Overrides {
                chains: Some(4),
                energy: Some(EnergyKind::Norm),
                ..Overrides::default()
            });
            cfg.output.include_burn_in = include_burn_in;
            cfg.sampler.track_both = true;
            let out = run_experiment(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("trace");
            export_traces(&path, format, &ExportMeta::new(&out.report.config_hash), &out.traces).unwrap();
            let (meta, records) = import_traces(&path, format).unwrap();
            assert_eq!(meta.config_hash, out.report.config_hash);
            let traces = split_chains(records, include_burn_in);
            let (acc, novel, epochs) = aggregate(&traces);
            let close = |a: Stat, b: Stat| (a.mean - b.mean).abs() <= 1e-12 && (a.std - b.std).abs() <= 1e-12;
            assert!(close(acc, out.report.acceptance_rate));
            assert!(close(novel, out.report.novel_rate));
            assert_eq!(epochs.len(), out.report.epochs.len());
            for (x, y) in epochs.iter().zip(&out.report.epochs) {
                assert_eq!(x.epoch, y.epoch);
                assert!(close(x.energy_raw.unwrap(), y.energy_raw.unwrap()));
                assert!(close(x.energy_norm.unwrap(), y.energy_norm.unwrap()));
            }
        }
    }
}

struct Flat(Vocab, usize);

impl Scorer for Flat {
    fn vocab(&self) -> Vocab {
        self.0
    }
    fn max_length(&self) -> usize {
        self.1
    }
    fn logits(&self, view: &MaskedView<'_>) -> seqmc_core::Result<Vec<LogitRow>> {
        Ok(vec![LogitRow::new(vec![0.0; self.0.len()])?; view.masked().len()])
    }
}

#[test]
fn twenty_six_epochs_of_length_twenty() {
    let m = Flat(Vocab::new(4).unwrap(), 20);
    let mut cfg = SamplerConfig::new(SamplerKind::Mh, EnergyKind::Raw, 20);
    cfg.epochs = 26;
    cfg.track_both = false;
    let r = run_chain(&m, &cfg, chain_rng(3, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    export_traces(&path, Format::Csv, &ExportMeta::new("h"), &[r.trace]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with('#'));
    assert!(lines[1].starts_with("chain_id,"));
    assert_eq!(lines.len() - 2, 520);
    // norm is not tracked: empty field, not zero
    assert!(lines[2].ends_with(",,1.0"), "{}", lines[2]);
}

#[test]
fn remote_model_matches_local() {
    let model = Arc::new(TabularMlm::generate(4, 3, 3, 2.0).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let served = model.clone();
    std::thread::spawn(move || seqmc_bridge::server::serve_tcp(&*served, "tab", listener));

    let base = Overrides {
        chains: Some(3),
        epochs: Some(12),
        burn_in: Some(2),
        ..Overrides::default()
    };
    let local = run_experiment(&config(Overrides {
        model_seed: Some(4),
        ..base.clone()
    }))
    .unwrap();
    let remote = run_experiment(&config(Overrides {
        endpoint: Some(format!("tcp://{addr}")),
        length: Some(3),
        ..base
    }))
    .unwrap();
    assert_eq!(local.traces, remote.traces);
    assert_eq!(local.report.acceptance_rate, remote.report.acceptance_rate);
    assert!(remote.report.oracle.is_none());
    assert!(remote.report.warnings.iter().any(|w| w.contains("remote")));
    assert!(local.report.oracle.is_some());
}
