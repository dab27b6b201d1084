//! Line-delimited JSON records for loss traces and encoder training.

use std::io::Write;

use rephoto_core::encoder::{EpochRecord, StepRecord, TrainObserver};
use rephoto_core::projector::{IterationRecord, StallWarning};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub stage: usize,
    pub iteration: usize,
    pub vgg: f64,
    pub face: f64,
    pub eye: f64,
    pub color: f64,
    pub ctx: f64,
    pub total: f64,
    pub noise_scale: f64,
    pub crf: [f64; 3],
}

impl From<&IterationRecord> for TraceLine {
    fn from(r: &IterationRecord) -> Self {
        let t = &r.terms;
        Self {
            stage: r.stage,
            iteration: r.iteration,
            vgg: t.vgg,
            face: t.face,
            eye: t.eye,
            color: t.color,
            ctx: t.ctx,
            total: t.total,
            noise_scale: r.noise_scale,
            crf: r.crf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarningLine {
    pub stage: usize,
    pub from_iteration: usize,
    pub to_iteration: usize,
    pub start_total: f64,
    pub end_total: f64,
}

impl From<&StallWarning> for WarningLine {
    fn from(w: &StallWarning) -> Self {
        Self {
            stage: w.stage,
            from_iteration: w.from_iteration,
            to_iteration: w.to_iteration,
            start_total: w.start_total,
            end_total: w.end_total,
        }
    }
}

pub fn write_jsonl<T: Serialize>(
    mut out: impl Write,
    rows: impl IntoIterator<Item = T>,
) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn write_trace(out: impl Write, trace: &[IterationRecord]) -> std::io::Result<()> {
    write_jsonl(out, trace.iter().map(TraceLine::from))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TrainLine {
    Step {
        epoch: usize,
        step: usize,
        l1: f64,
    },
    Epoch {
        epoch: usize,
        mean_l1: f64,
        steps: usize,
    },
}

/// Streams training progress as JSON lines. Write errors are kept and
/// reported once at the end.
#[derive(Debug)]
pub struct JsonlTrainLog<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> JsonlTrainLog<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    fn emit(&mut self, line: TrainLine) {
        if self.error.is_none() {
            if let Err(e) = write_jsonl(&mut self.out, [line]) {
                self.error = Some(e);
            }
        }
    }

    pub fn finish(self) -> std::io::Result<W> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.out),
        }
    }
}

impl<W: Write> TrainObserver for JsonlTrainLog<W> {
    fn on_step(&mut self, r: &StepRecord) {
        self.emit(TrainLine::Step {
            epoch: r.epoch,
            step: r.step,
            l1: r.l1,
        });
    }

    fn on_epoch(
        &mut self,
        r: &EpochRecord,
        _: &rephoto_core::encoder::Encoder,
    ) -> rephoto_core::Result<()> {
        self.emit(TrainLine::Epoch {
            epoch: r.epoch,
            mean_l1: r.mean_l1,
            steps: r.steps,
        });
        Ok(())
    }
}
