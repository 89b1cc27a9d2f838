use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// `|pred∩gt| / |pred∪gt|` for class `k`, or `None` when the union is empty.
pub fn iou_per_class(pred: &[u16], gt: &[u16], k: u16) -> Result<Option<Real>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predicted labels vs {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == k, g == k);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok((union > 0).then(|| inter as Real / union as Real))
}

/// Unweighted mean IoU over the classes in `classes` whose union is nonempty.
pub fn miou(pred: &[u16], gt: &[u16], classes: &[u16]) -> Result<Real> {
    let mut sum = 0.0;
    let mut count = 0;
    for &k in classes {
        if let Some(iou) = iou_per_class(pred, gt, k)? {
            sum += iou;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid(
            "no evaluated class occurs in prediction or ground truth",
        ));
    }
    Ok(sum / count as Real)
}

/// Classes scored by default: all but the empty class unless `include_empty`.
pub fn eval_classes(num_classes: usize, include_empty: bool) -> Vec<u16> {
    let first = if include_empty { 0 } else { 1 };
    (first..num_classes as u16).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: u16,
    pub name: String,
    /// `None` when the class occurs in neither grid.
    pub iou: Option<Real>,
}

/// Per-class IoU and mIoU of one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassIou>,
    pub miou: Real,
}

impl MetricReport {
    pub fn compute(
        pred: &[u16],
        gt: &[u16],
        class_names: &[String],
        include_empty: bool,
    ) -> Result<Self> {
        let classes = eval_classes(class_names.len(), include_empty);
        let per_class = classes
            .iter()
            .map(|&k| {
                Ok(ClassIou {
                    class: k,
                    name: class_names[k as usize].clone(),
                    iou: iou_per_class(pred, gt, k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            miou: miou(pred, gt, &classes)?,
            per_class,
        })
    }

    /// Average of several reports: per-class IoUs over the runs where the
    /// class was scored, mIoU over all runs.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::invalid("no reports to average"))?;
        let per_class = first
            .per_class
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let vals: Vec<Real> = reports.iter().filter_map(|r| r.per_class[i].iou).collect();
                ClassIou {
                    class: c.class,
                    name: c.name.clone(),
                    iou: (!vals.is_empty()).then(|| vals.iter().sum::<Real>() / vals.len() as Real),
                }
            })
            .collect();
        Ok(Self {
            per_class,
            miou: reports.iter().map(|r| r.miou).sum::<Real>() / reports.len() as Real,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .per_class
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        writeln!(f, "{:<width$}  IoU", "class")?;
        for c in &self.per_class {
            match c.iou {
                Some(v) => writeln!(f, "{:<width$}  {:.4}", c.name, v)?,
                None => writeln!(f, "{:<width$}  -", c.name)?,
            }
        }
        write!(f, "{:<width$}  {:.4}", "mIoU", self.miou)
    }
}
