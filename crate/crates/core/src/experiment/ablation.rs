use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::init_encoder;
use crate::training::Sharing;

use super::{run_finetune, run_pretrain_joint, run_pretrain_ventral, ExperimentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Separation,
    Sharing,
    MaskRatio,
    Targets,
    Init,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Separation => "separation",
            AblationAxis::Sharing => "sharing",
            AblationAxis::MaskRatio => "mask_ratio",
            AblationAxis::Targets => "targets",
            AblationAxis::Init => "init",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "separation" => AblationAxis::Separation,
            "sharing" => AblationAxis::Sharing,
            "mask_ratio" => AblationAxis::MaskRatio,
            "targets" => AblationAxis::Targets,
            "init" => AblationAxis::Init,
            _ => {
                return Err(config_err!(
                    "unknown axis {s:?} (separation, sharing, mask_ratio, targets, init)"
                ))
            }
        })
    }
}

/// Returns `base` with one axis set to `value`.
///
/// Separation values are dash-joined block indices (`2-4-12`), targets are
/// `v1`, `v1-v2` or `v1-v2-v4mt` and select which decoders carry weight,
/// init is `ventral` (pretrained ventral weights) or `scratch`.
pub fn parse_axis_value(base: &ExperimentConfig, axis: AblationAxis, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::Separation => {
            let sep = value
                .split('-')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| config_err!("separation {value:?} is not dash-joined block indices"))?;
            cfg.model.separation = sep;
            let taps = cfg.model.separation.len();
            for t in [&mut cfg.ventral, &mut cfg.joint] {
                t.tap_weights = vec![1.0; taps];
                t.shared_prefix = None;
            }
        }
        AblationAxis::Sharing => cfg.joint.sharing = value.parse::<Sharing>()?,
        AblationAxis::MaskRatio => {
            let r: f64 = value
                .parse()
                .map_err(|_| config_err!("mask ratio {value:?} is not a number"))?;
            cfg.joint.mask.ratio_video = r;
        }
        AblationAxis::Targets => {
            let on = match value {
                "v1" => 1,
                "v1-v2" => 2,
                "v1-v2-v4mt" => 3,
                _ => return Err(config_err!("targets {value:?} (v1, v1-v2, v1-v2-v4mt)")),
            };
            let taps = cfg.model.num_taps();
            if taps != 3 {
                return Err(config_err!("the targets axis needs three taps, found {taps}"));
            }
            let w: Vec<f64> = (0..taps).map(|i| if i < on { 1.0 } else { 0.0 }).collect();
            cfg.ventral.tap_weights = w.clone();
            cfg.joint.tap_weights = w;
        }
        AblationAxis::Init => match value {
            "ventral" | "scratch" => {}
            _ => return Err(config_err!("init {value:?} (ventral, scratch)")),
        },
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub l: f64,
    pub l_v: f64,
    pub l_d: f64,
    pub test_acc: f64,
}

/// One full pretrain/finetune pipeline per value; every run reuses the same
/// datasets and seeds so that only the ablated setting differs.
pub fn run_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
    values: &[String],
    mut on_row: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let cfgs = values
        .iter()
        .map(|v| parse_axis_value(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let images = base.shapes_dataset()?.images;
    let clips = base.motion_dataset()?.clips;
    let (train, test) = base.finetune_datasets()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&cfgs) {
        let mut store = if axis == AblationAxis::Init && value == "scratch" {
            init_encoder(&cfg.ventral_branch()?, cfg.ventral.seed)?
        } else {
            run_pretrain_ventral(cfg, &images, |_| Ok(()))?.0
        };
        let (dorsal, reports) = run_pretrain_joint(cfg, &mut store, &clips, |_| Ok(()))?;
        let last = reports
            .last()
            .ok_or_else(|| config_err!("joint pretraining ran no steps"))?;
        let ft = run_finetune(&cfg.finetune, &mut store, &dorsal, &train, &test, |_| Ok(()))?;
        let row = AblationRow {
            axis,
            value: value.clone(),
            l: last.l,
            l_v: last.l_v,
            l_d: last.l_d,
            test_acc: ft.test_acc,
        };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,value,l,l_v,l_d,test_acc\n");
    for r in rows {
        s += &format!("{},{},{},{},{},{}\n", r.axis, r.value, r.l, r.l_v, r.l_d, r.test_acc);
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| axis | value | L | L_V | L_D | test acc |\n|---|---|---|---|---|---|\n");
    for r in rows {
        s += &format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.1}% |\n",
            r.axis,
            r.value,
            r.l,
            r.l_v,
            r.l_d,
            100.0 * r.test_acc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_apply() {
        let base = ExperimentConfig::toy();
        let c = parse_axis_value(&base, AblationAxis::Separation, "12").unwrap();
        assert_eq!(c.model.separation, vec![12]);
        assert_eq!(c.joint.tap_weights, vec![1.0]);
        let c = parse_axis_value(&base, AblationAxis::Targets, "v1-v2").unwrap();
        assert_eq!(c.joint.tap_weights, vec![1.0, 1.0, 0.0]);
        let c = parse_axis_value(&base, AblationAxis::MaskRatio, "0.5").unwrap();
        assert_eq!(c.joint.mask.ratio_video, 0.5);
        assert!(parse_axis_value(&base, AblationAxis::Separation, "4-2-12").is_err());
        assert!(parse_axis_value(&base, AblationAxis::Sharing, "most").is_err());
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn tables_have_one_row_per_run() {
        let row = AblationRow {
            axis: AblationAxis::Sharing,
            value: "none".into(),
            l: 1.0,
            l_v: 0.5,
            l_d: 0.5,
            test_acc: 0.25,
        };
        let csv = ablation_csv(&[row.clone(), row.clone()]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("sharing,none,1,0.5,0.5,0.25"));
        assert!(ablation_markdown(&[row]).contains("| sharing | none |"));
    }
}
