//! Delimited metric streams.
//!
//! Every stream starts with a header and each row is prefixed by a logical
//! sequence number rather than wall-clock time, so reruns with the same seed
//! produce byte-identical files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row has {got} fields, header has {want}")]
    Width { got: usize, want: usize },
}

pub trait MetricsRow {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

pub const SEQ_COLUMN: &str = "seq";

/// CSV writer that flushes after every row.
pub struct MetricsSink {
    out: csv::Writer<BufWriter<File>>,
    width: usize,
    seq: u64,
}

impl MetricsSink {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, MetricsError> {
        let mut out = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        out.write_record(std::iter::once(SEQ_COLUMN).chain(header.iter().copied()))?;
        out.flush()?;
        Ok(Self { out, width: header.len(), seq: 0 })
    }

    pub fn for_rows<R: MetricsRow>(path: &Path) -> Result<Self, MetricsError> {
        Self::create(path, R::header())
    }

    pub fn write_fields(&mut self, fields: &[String]) -> Result<(), MetricsError> {
        if fields.len() != self.width {
            return Err(MetricsError::Width { got: fields.len(), want: self.width });
        }
        let seq = self.seq.to_string();
        self.out.write_record(std::iter::once(seq.as_str()).chain(fields.iter().map(String::as_str)))?;
        self.out.flush()?;
        self.seq += 1;
        Ok(())
    }

    pub fn write<R: MetricsRow>(&mut self, row: &R) -> Result<(), MetricsError> {
        self.write_fields(&row.fields())
    }

    pub fn rows_written(&self) -> u64 {
        self.seq
    }
}

/// Adapts a sink to the `io::Result` callbacks used by the trainers.
pub fn io_sink<R: MetricsRow>(sink: &mut MetricsSink) -> impl FnMut(&R) -> std::io::Result<()> + '_ {
    move |r| sink.write(r).map_err(|e| std::io::Error::other(e.to_string()))
}

impl MetricsRow for crate::eval::EpisodeRow {
    fn header() -> &'static [&'static str] {
        &[
            "clip",
            "scenario_seed",
            "kind",
            "seed",
            "route_completion",
            "collisions",
            "red_lights",
            "off_lane",
            "success",
            "score",
            "steps",
            "timed_out",
            "numerical_failure",
        ]
    }

    fn fields(&self) -> Vec<String> {
        let r = &self.result;
        let flag = |b: bool| u8::from(b).to_string();
        vec![
            self.clip.to_string(),
            self.scenario_seed.to_string(),
            self.kind.clone(),
            self.seed.to_string(),
            r.route_completion.to_string(),
            r.collisions.to_string(),
            r.red_lights.to_string(),
            r.off_lane.to_string(),
            flag(r.success),
            r.score.to_string(),
            r.steps.to_string(),
            flag(r.timed_out),
            flag(r.numerical_failure),
        ]
    }
}

impl MetricsRow for crate::eval::SuiteSummary {
    fn header() -> &'static [&'static str] {
        &[
            "episodes",
            "success_rate",
            "score_mean",
            "score_std",
            "completion_mean",
            "collisions",
            "red_lights",
            "off_lane",
            "numerical_failures",
        ]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.episodes.to_string(),
            self.success_rate.to_string(),
            self.score_mean.to_string(),
            self.score_std.to_string(),
            self.completion_mean.to_string(),
            self.collisions.to_string(),
            self.red_lights.to_string(),
            self.off_lane.to_string(),
            self.numerical_failures.to_string(),
        ]
    }
}

impl MetricsRow for crate::grpo::RlRow {
    fn header() -> &'static [&'static str] {
        &crate::grpo::RlRow::HEADER
    }

    fn fields(&self) -> Vec<String> {
        crate::grpo::RlRow::fields(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_get_sequence_numbers_and_width_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut s = MetricsSink::create(&p, &["a", "b"]).unwrap();
        s.write_fields(&["1".into(), "x,y".into()]).unwrap();
        s.write_fields(&["2".into(), "z".into()]).unwrap();
        assert!(matches!(s.write_fields(&["3".into()]), Err(MetricsError::Width { got: 1, want: 2 })));
        drop(s);
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "seq,a,b\n0,1,\"x,y\"\n1,2,z\n");
    }
}
