use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, fit, NoObserver, RunConfig};
use crate::data::FlowDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyAxis {
    Ablation,
    BlockCount,
    BlockOrder,
}

impl FromStr for StudyAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Self::Ablation),
            "block_count" => Ok(Self::BlockCount),
            "block_order" => Ok(Self::BlockOrder),
            other => Err(Error::Config(vec![format!(
                "unknown study axis {other:?} (expected ablation, block_count or block_order)"
            )])),
        }
    }
}

/// Named configurations for one study axis, all sharing `base`'s seed.
pub fn study_variants(base: &RunConfig, axis: StudyAxis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        StudyAxis::Ablation => vec![
            ("full".to_string(), base.clone()),
            ("w/o t_in".to_string(), with(&|c| c.model.use_t_in = false)),
            ("w/o s_in".to_string(), with(&|c| c.model.use_s_in = false)),
            ("w/o SA_bias".to_string(), with(&|c| c.model.use_sa_bias = false)),
            ("w/o STMoE".to_string(), with(&|c| c.model.use_moe = false)),
        ],
        StudyAxis::BlockCount => (1..=4)
            .map(|n| {
                let order = "S".repeat(n) + &"T".repeat(n);
                (order.clone(), with(&|c| c.model.block_order = order.clone()))
            })
            .collect(),
        StudyAxis::BlockOrder => ["SSSTTT", "STSTST", "TTTSSS", "TSTSTS"]
            .iter()
            .map(|o| (o.to_string(), with(&|c| c.model.block_order = o.to_string())))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub variant: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub epochs: usize,
    pub params: usize,
}

pub const STUDY_CSV_HEADER: &str = "variant,mae,rmse,mape,epochs,params";

pub fn format_study_csv(rows: &[StudyRow]) -> String {
    let mut out = format!("{STUDY_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{},{}",
            r.variant, r.mae, r.rmse, r.mape, r.epochs, r.params
        )
        .unwrap();
    }
    out
}

fn tag(variant: &str, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("variant {variant}: {m}")),
        Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("variant {variant}: {m}")).collect()),
        other => Error::Data(format!("variant {variant}: {other}")),
    }
}

/// Trains one model per variant on the same data and reports test-split metrics.
pub fn run_study(base: &RunConfig, ds: &FlowDataset, axis: StudyAxis) -> Result<Vec<StudyRow>> {
    study_variants(base, axis)
        .into_iter()
        .map(|(name, run)| {
            let (model, history, data) = fit(&run, ds, &mut NoObserver).map_err(|e| tag(&name, e))?;
            let report = evaluate(&model, &data.raw.test, run.train.threshold).map_err(|e| tag(&name, e))?;
            Ok(StudyRow {
                variant: name,
                mae: report.mae,
                rmse: report.rmse,
                mape: report.mape,
                epochs: history.records.len(),
                params: model.num_parameters(),
            })
        })
        .collect()
}
