//! CSV and JSON sinks. Floats are written with 17 significant digits so every
//! value parses back to the identical `f64`; files are replaced atomically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use mgt_core::experiments::ExperimentOutput;
use mgt_core::report::{check_records, summarize, MetricsRecord};
use mgt_core::train::RunResult;
use mgt_core::{MgtError, Result};

pub const METRICS_HEADER: [&str; 8] = [
    "run_id",
    "experiment",
    "variant",
    "depth",
    "seed",
    "index",
    "metric",
    "value",
];
pub const RANK_HEADER: [&str; 5] = ["layer", "variant", "depth", "seed", "rank_eff"];
pub const BETA_HEADER: [&str; 8] = [
    "checkpoint",
    "layer",
    "variant",
    "depth",
    "seed",
    "beta_mean",
    "beta_var",
    "beta_neg_frac",
];
pub const RUNS_HEADER: [&str; 6] = [
    "run_id",
    "variant",
    "depth",
    "seed",
    "batch_digest",
    "aborted",
];

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> MgtError {
    MgtError::Io(format!("csv: {e}"))
}

fn write_rows<const N: usize>(
    header: [&str; N],
    rows: impl IntoIterator<Item = [String; N]>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| MgtError::Io(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| MgtError::Io(e.to_string()))
}

pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    check_records(records)?;
    write_rows(
        METRICS_HEADER,
        records.iter().map(|r| {
            [
                r.run_id.clone(),
                r.experiment.clone(),
                r.variant.clone(),
                r.depth.to_string(),
                r.seed.to_string(),
                r.index.to_string(),
                r.metric.clone(),
                format_float(r.value),
            ]
        }),
    )
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_err)?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(MgtError::Ingestion(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let bad = |field: &str| MgtError::Ingestion(format!("row {}: bad {field}", n + 1));
        let num = |i: usize, name: &str| row[i].parse::<u64>().map_err(|_| bad(name));
        out.push(MetricsRecord {
            run_id: row[0].to_string(),
            experiment: row[1].to_string(),
            variant: row[2].to_string(),
            depth: num(3, "depth")? as usize,
            seed: num(4, "seed")?,
            index: num(5, "index")? as usize,
            metric: row[6].to_string(),
            value: row[7].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(out)
}

/// Per-layer effective rank of each run's final probe.
pub fn rank_csv(records: &[MetricsRecord]) -> Result<String> {
    write_rows(
        RANK_HEADER,
        records.iter().filter(|r| r.metric == "rank_eff").map(|r| {
            [
                r.index.to_string(),
                r.variant.clone(),
                r.depth.to_string(),
                r.seed.to_string(),
                format_float(r.value),
            ]
        }),
    )
}

/// β statistics per checkpoint and layer, from `beta_*@<percent>` records,
/// ordered by run, checkpoint and layer.
pub fn beta_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut lookup = BTreeMap::new();
    for r in records {
        lookup.insert((r.run_id.as_str(), r.index, r.metric.as_str()), r.value);
    }
    let mut run_order: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let next = run_order.len();
        run_order.entry(r.run_id.as_str()).or_insert(next);
    }
    let mut rows = Vec::new();
    for r in records {
        let Some(checkpoint) = r.metric.strip_prefix("beta_mean@") else {
            continue;
        };
        let order = (
            run_order[r.run_id.as_str()],
            checkpoint.parse::<usize>().unwrap_or(usize::MAX),
            r.index,
        );
        let get = |name: &str| {
            let key = format!("{name}@{checkpoint}");
            lookup
                .get(&(r.run_id.as_str(), r.index, key.as_str()))
                .copied()
                .ok_or_else(|| MgtError::Contract(format!("missing {key} for run {}", r.run_id)))
        };
        rows.push((
            order,
            [
                checkpoint.to_string(),
                r.index.to_string(),
                r.variant.clone(),
                r.depth.to_string(),
                r.seed.to_string(),
                format_float(r.value),
                format_float(get("beta_var")?),
                format_float(get("beta_neg_frac")?),
            ],
        ));
    }
    rows.sort_by_key(|(order, _)| *order);
    write_rows(BETA_HEADER, rows.into_iter().map(|(_, row)| row))
}

/// One row per run: identity, data-order digest and abort flag.
pub fn runs_csv(runs: &[RunResult]) -> Result<String> {
    write_rows(
        RUNS_HEADER,
        runs.iter().map(|r| {
            [
                r.config_hash.clone(),
                r.variant.name().to_string(),
                r.depth.to_string(),
                r.seed.to_string(),
                r.batch_digest.clone(),
                r.aborted.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn summary_json(experiment: &str, records: &[MetricsRecord]) -> Result<String> {
    let value = summarize(experiment, records);
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| MgtError::Io(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| MgtError::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Creates `dir` if needed and proves it accepts new files.
pub fn check_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| MgtError::Io(format!("cannot create {}: {e}", dir.display())))?;
    tempfile::NamedTempFile::new_in(dir)
        .map(drop)
        .map_err(|e| MgtError::Io(format!("{} is not writable: {e}", dir.display())))
}

/// Writes every sink for an experiment and returns the paths written.
pub fn emit_experiment(dir: &Path, output: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    let files = [
        ("metrics.csv", metrics_csv(&output.records)?),
        ("rank.csv", rank_csv(&output.records)?),
        ("beta.csv", beta_csv(&output.records)?),
        ("runs.csv", runs_csv(&output.runs)?),
        (
            "summary.json",
            summary_json(output.experiment, &output.records)?,
        ),
    ];
    let mut written = Vec::new();
    for (name, contents) in files {
        let path = dir.join(name);
        write_atomic(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}
