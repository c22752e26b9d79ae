//! Panel data CSV: one row per visit, columns `id`, `time`, `state` (1-based)
//! and the configured covariates, in any order. Extra columns are ignored.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::CliError;
use crate::likelihood::{Individual, Observation, PanelDataset};
use crate::markov::TransitionStructure;

/// Counts reported by [`ingest`].
#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Rows dropped by `data.max_time`.
    pub rows_filtered: usize,
    pub rows_used: usize,
    pub individuals: usize,
    /// Individuals left with a single observation by `data.max_time`.
    pub dropped_individuals: Vec<String>,
    pub state_labels: Vec<String>,
    /// Successive-state pair counts, `pairs[from][to]`.
    pub pairs: Vec<Vec<usize>>,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} rows read, {} beyond max_time, {} used; {} individuals ({} left with one observation by max_time and dropped)",
            self.rows_read,
            self.rows_filtered,
            self.rows_used,
            self.individuals,
            self.dropped_individuals.len()
        )?;
        write!(f, "{:>10}", "from\\to")?;
        for s in 1..=self.pairs.len() {
            write!(f, "{s:>8}")?;
        }
        writeln!(f)?;
        for (r, row) in self.pairs.iter().enumerate() {
            write!(f, "{:>10}", r + 1)?;
            for c in row {
                write!(f, "{c:>8}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// States reachable from each state through allowed transitions.
fn reachability(structure: &TransitionStructure) -> Vec<Vec<bool>> {
    let d = structure.n_states();
    let mut reach = vec![vec![false; d]; d];
    for (r, row) in reach.iter_mut().enumerate() {
        row[r] = true;
    }
    for tr in structure.transitions() {
        reach[tr.from][tr.to] = true;
    }
    for k in 0..d {
        for i in 0..d {
            if reach[i][k] {
                for j in 0..d {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach
}

fn column(headers: &csv::StringRecord, name: &str, what: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| {
            CliError::Validation(format!("{what} column `{name}` is missing from the header"))
        })
}

/// Reads and validates panel data against `config`.
pub fn ingest<R: Read>(
    reader: R,
    config: &ModelConfig,
) -> Result<(PanelDataset, IngestReport), CliError> {
    let structure = config.structure()?;
    let d = config.n_states();
    let death = d - 1;
    let reach = reachability(&structure);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Validation(format!("CSV header: {e}")))?
        .clone();
    let id_col = column(&headers, "id", "required")?;
    let time_col = column(&headers, "time", "required")?;
    let state_col = column(&headers, "state", "required")?;
    let cov_cols = config
        .covariates
        .names
        .iter()
        .map(|n| column(&headers, n, "covariate"))
        .collect::<Result<Vec<_>, _>>()?;

    // rows grouped by id, in order of first appearance
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(u64, Observation)>> = HashMap::new();
    let mut rows_read = 0;
    let mut rows_filtered = 0;
    let mut first_line: HashMap<String, u64> = HashMap::new();
    let mut raw_counts: HashMap<String, (u64, usize)> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::Validation(format!("CSV: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        rows_read += 1;
        let bad = |col: &str, v: &str, why: &str| {
            CliError::Validation(format!("line {line}: column `{col}` value `{v}` {why}"))
        };
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(bad("id", "", "is empty"));
        }
        let raw_time = record.get(time_col).unwrap_or("");
        let time: f64 = raw_time
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| bad("time", raw_time, "is not a finite number"))?;
        let raw_state = record.get(state_col).unwrap_or("");
        let state: usize = raw_state
            .parse()
            .ok()
            .filter(|s| (1..=d).contains(s))
            .ok_or_else(|| bad("state", raw_state, &format!("is not a state in 1..={d}")))?;
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (&c, name) in cov_cols.iter().zip(&config.covariates.names) {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| bad(name, raw, "is not a finite number"))?;
            covariates.push(v);
        }
        let first = *first_line.entry(id.clone()).or_insert(line);
        raw_counts.entry(id.clone()).or_insert((first, 0)).1 += 1;
        if config.data.max_time.is_some_and(|m| time > m) {
            rows_filtered += 1;
            continue;
        }
        let obs = Observation {
            time,
            state: state - 1,
            covariates,
        };
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push((line, obs));
    }

    let mut single: Vec<_> = raw_counts
        .iter()
        .filter(|(_, (_, n))| *n < 2)
        .map(|(id, (line, _))| (*line, id.clone()))
        .collect();
    if !single.is_empty() {
        single.sort();
        let shown: Vec<String> = single
            .iter()
            .take(5)
            .map(|(l, id)| format!("{id} (line {l})"))
            .collect();
        return Err(CliError::Validation(format!(
            "{} individual(s) with a single observation: {}",
            single.len(),
            shown.join(", ")
        )));
    }

    let mut individuals = Vec::new();
    let mut dropped = Vec::new();
    for id in order {
        let rows = groups.remove(&id).expect("grouped above");
        for w in rows.windows(2) {
            let ((l0, a), (l1, b)) = (&w[0], &w[1]);
            if b.time <= a.time {
                return Err(CliError::Validation(format!(
                    "individual {id}: times not increasing at lines {l0}-{l1} ({} then {})",
                    a.time, b.time
                )));
            }
            if a.state == death {
                return Err(CliError::Validation(format!(
                    "individual {id}: observation at line {l1} follows death at line {l0}"
                )));
            }
            if !reach[a.state][b.state] {
                return Err(CliError::Validation(format!(
                    "individual {id}: transition {}->{} at lines {l0}-{l1} is impossible under the configured model",
                    a.state + 1,
                    b.state + 1
                )));
            }
        }
        if rows.len() < 2 {
            dropped.push(id);
            continue;
        }
        let observations: Vec<Observation> = rows.into_iter().map(|(_, o)| o).collect();
        let death_exact =
            config.likelihood.exact_death && observations.last().map(|o| o.state) == Some(death);
        individuals.push(Individual {
            id,
            observations,
            death_exact,
        });
    }
    if individuals.is_empty() {
        return Err(CliError::Validation(
            "no individual has two or more observations".into(),
        ));
    }
    let data = PanelDataset::new(individuals, d, config.covariates.names.len())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let report = IngestReport {
        rows_read,
        rows_filtered,
        rows_used: data.n_rows(),
        individuals: data.len(),
        dropped_individuals: dropped,
        state_labels: config.states.labels.clone(),
        pairs: data.pair_table(),
    };
    Ok((data, report))
}

pub fn ingest_path(
    path: &Path,
    config: &ModelConfig,
) -> Result<(PanelDataset, IngestReport), CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    ingest(std::io::BufReader::new(file), config).map_err(|e| match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes `data` in the ingest format. Numbers use the shortest representation
/// that parses back to the same value.
pub fn write_dataset<W: Write>(
    writer: W,
    data: &PanelDataset,
    covariate_names: &[String],
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "time".into(), "state".into()];
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header).map_err(CliError::csv)?;
    for ind in data.individuals() {
        for o in &ind.observations {
            let mut row = vec![
                ind.id.clone(),
                o.time.to_string(),
                (o.state + 1).to_string(),
            ];
            row.extend(o.covariates.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(CliError::csv)?;
        }
    }
    w.flush().map_err(|e| CliError::Output(e.to_string()))
}

/// Pair table as CSV rows `from,to,count` (1-based states).
pub fn write_pairs<W: Write>(writer: W, report: &IngestReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["from", "to", "count"])
        .map_err(CliError::csv)?;
    for (r, row) in report.pairs.iter().enumerate() {
        for (s, c) in row.iter().enumerate() {
            w.write_record([(r + 1).to_string(), (s + 1).to_string(), c.to_string()])
                .map_err(CliError::csv)?;
        }
    }
    w.flush().map_err(|e| CliError::Output(e.to_string()))
}
