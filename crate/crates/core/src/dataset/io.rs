//! CSV storage for episodes.
//!
//! Observations: `episode_id,time_hours,channel,value` (channel by name).
//! Labels: `episode_id,label`. The label file defines which episodes exist
//! and in what order; an episode may have no observation rows.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use super::{Episode, IrregularSeries, Observation, Schema};
use crate::error::{Error, Result};

const OBS_HEADER: [&str; 4] = ["episode_id", "time_hours", "channel", "value"];
const LABEL_HEADER: [&str; 2] = ["episode_id", "label"];

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    if headers.is_empty() {
        return Ok(());
    }
    if headers.iter().ne(expected.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("expected header {:?}, got {:?}", expected.join(","), headers),
        ));
    }
    Ok(())
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(path, line, format!("{what} {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{what} {field:?} is not finite")));
    }
    Ok(v)
}

/// Reads labels and observations into episodes, in label-file order.
pub fn load_episodes(observations: &Path, labels: &Path, schema: Arc<Schema>) -> Result<Vec<Episode>> {
    let mut rdr = reader(labels)?;
    check_header(labels, &mut rdr, &LABEL_HEADER)?;
    let mut order: Vec<(String, f64)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(labels, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_err(labels, line, format!("expected 2 fields, got {}", rec.len())));
        }
        let id = rec[0].to_string();
        let label = parse_f64(labels, line, &rec[1], "label")?;
        if label < 0.0 {
            return Err(parse_err(labels, line, format!("negative label {label}")));
        }
        if index.insert(id.clone(), order.len()).is_some() {
            return Err(parse_err(labels, line, format!("duplicate episode id {id:?}")));
        }
        order.push((id, label));
    }

    let mut per_episode: Vec<Vec<Observation>> = vec![Vec::new(); order.len()];
    let mut rdr = reader(observations)?;
    check_header(observations, &mut rdr, &OBS_HEADER)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(observations, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(parse_err(observations, line, format!("expected 4 fields, got {}", rec.len())));
        }
        let &ep = index
            .get(&rec[0])
            .ok_or_else(|| parse_err(observations, line, format!("episode {:?} has no label", &rec[0])))?;
        let time = parse_f64(observations, line, &rec[1], "time")?;
        if time < 0.0 {
            return Err(parse_err(observations, line, format!("negative time {time}")));
        }
        let channel = schema
            .index_of(&rec[2])
            .ok_or_else(|| parse_err(observations, line, format!("unknown channel {:?}", &rec[2])))?;
        let value = parse_f64(observations, line, &rec[3], "value")?;
        let o = Observation { time, channel, value };
        super::check_observation(&schema, &o).map_err(|e| parse_err(observations, line, e.to_string()))?;
        per_episode[ep].push(o);
    }

    order
        .into_iter()
        .zip(per_episode)
        .map(|((id, label), obs)| {
            Ok(Episode {
                id,
                series: IrregularSeries::new(Arc::clone(&schema), obs)?,
                label,
            })
        })
        .collect()
}

pub fn write_observations<W: Write>(out: W, episodes: &[Episode]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::IoPlain(e.into());
    w.write_record(OBS_HEADER).map_err(io)?;
    for ep in episodes {
        let schema = ep.series.schema();
        for o in ep.series.observations() {
            w.write_record([
                ep.id.as_str(),
                &o.time.to_string(),
                &schema.channels[o.channel].name,
                &o.value.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels<W: Write>(out: W, episodes: &[Episode]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::IoPlain(e.into());
    w.write_record(LABEL_HEADER).map_err(io)?;
    for ep in episodes {
        w.write_record([ep.id.as_str(), &ep.label.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes both CSV files for a set of episodes.
pub fn write_episodes(observations: &Path, labels: &Path, episodes: &[Episode]) -> Result<()> {
    let f = File::create(observations).map_err(|e| Error::io(observations, e))?;
    write_observations(std::io::BufWriter::new(f), episodes)?;
    let f = File::create(labels).map_err(|e| Error::io(labels, e))?;
    write_labels(std::io::BufWriter::new(f), episodes)
}
