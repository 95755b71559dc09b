use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch training curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

pub fn epochs_to_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ));
    }
    s
}

pub fn epochs_from_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("epoch csv line {}: `{line}`", i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad());
        out.push(EpochRecord {
            epoch: f[0].trim().parse().map_err(|_| bad())?,
            train_loss: num(1)?,
            train_acc: num(2)?,
            val_loss: num(3)?,
            val_acc: num(4)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on validation loss. An epoch improves when its
/// loss is below the best so far by more than `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Result<Self> {
        if patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        Ok(Self { patience, min_delta, best: None, stale: 0 })
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Decision {
        match self.best {
            Some((_, best)) if val_loss >= best - self.min_delta => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Decision::Stop
                } else {
                    Decision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.stale = 0;
                Decision::Improved
            }
        }
    }

    /// (epoch, loss) of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One epoch of work plus snapshotting of the state worth restoring.
pub trait EpochRunner {
    type Snapshot;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord>;

    fn snapshot(&self) -> Self::Snapshot;

    /// Called after an improving epoch, with its snapshot already taken.
    fn on_improvement(&mut self, _record: &EpochRecord, _snapshot: &Self::Snapshot) -> Result<()> {
        Ok(())
    }
}

pub struct StopOutcome<S> {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub stopped_early: bool,
    pub best: S,
}

/// Run epochs until patience runs out or `max_epochs` is reached, returning
/// the snapshot taken at the best epoch.
pub fn run_with_early_stopping<R: EpochRunner>(
    runner: &mut R,
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
) -> Result<StopOutcome<R::Snapshot>> {
    if max_epochs == 0 {
        return Err(Error::InvalidArgument("max_epochs must be at least 1".into()));
    }
    let mut stopper = EarlyStopping::new(patience, min_delta)?;
    let mut records = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    for epoch in 1..=max_epochs {
        let record = runner.run_epoch(epoch)?;
        if !record.val_loss.is_finite() || !record.train_loss.is_finite() {
            return Err(Error::Diverged { epoch, detail: "non-finite loss".into() });
        }
        records.push(record);
        match stopper.observe(epoch, record.val_loss) {
            Decision::Improved => {
                let snap = runner.snapshot();
                runner.on_improvement(&record, &snap)?;
                best = Some(snap);
            }
            Decision::Continue => {}
            Decision::Stop => {
                stopped_early = epoch < max_epochs;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    Ok(StopOutcome {
        stop_epoch: records.len(),
        records,
        best_epoch,
        best_val_loss,
        stopped_early,
        best: best.expect("an improving epoch was snapshotted"),
    })
}
