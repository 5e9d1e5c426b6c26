//! Segmentation metrics: overlap scores, surface distances, per-case and
//! pooled aggregation, and the paired t-test.
//!
//! The organ class is scored on labels {1, 2} (lesions lie inside the organ)
//! and the lesion class on label 2.

mod surface;
mod ttest;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use crate::error::{shape_err, Error, Result};
use crate::volume::Volume;

pub use surface::{surface_distances, surface_points, SurfaceDistances};
pub use ttest::{paired_ttest, TTest};

/// Voxel counts behind every overlap score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: usize,
    pub pred: usize,
    pub reference: usize,
}

impl Overlap {
    pub fn of(pred: &[bool], reference: &[bool]) -> Result<Self> {
        if pred.len() != reference.len() {
            return Err(shape_err!("masks hold {} and {} voxels", pred.len(), reference.len()));
        }
        let mut o = Overlap::default();
        for (&p, &r) in pred.iter().zip(reference) {
            o.pred += usize::from(p);
            o.reference += usize::from(r);
            o.intersection += usize::from(p && r);
        }
        Ok(o)
    }

    /// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.pred + self.reference;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    /// `1 - |A∩B| / |A∪B|`; 0 when both masks are empty.
    pub fn voe(&self) -> f64 {
        let union = self.pred + self.reference - self.intersection;
        if union == 0 {
            0.0
        } else {
            1.0 - self.intersection as f64 / union as f64
        }
    }

    /// `(|A| - |B|) / |B|`, undefined for an empty reference.
    pub fn rvd(&self) -> Option<f64> {
        (self.reference > 0).then(|| (self.pred as f64 - self.reference as f64) / self.reference as f64)
    }
}

fn check_dims(pred: &Volume<bool>, reference: &Volume<bool>) -> Result<()> {
    if pred.dims() != reference.dims() {
        return Err(shape_err!("prediction {:?} and reference {:?} differ", pred.dims(), reference.dims()));
    }
    Ok(())
}

pub fn dice(pred: &Volume<bool>, reference: &Volume<bool>) -> Result<f64> {
    check_dims(pred, reference)?;
    Ok(Overlap::of(pred.data(), reference.data())?.dice())
}

pub fn voe(pred: &Volume<bool>, reference: &Volume<bool>) -> Result<f64> {
    check_dims(pred, reference)?;
    Ok(Overlap::of(pred.data(), reference.data())?.voe())
}

pub fn rvd(pred: &Volume<bool>, reference: &Volume<bool>) -> Result<Option<f64>> {
    check_dims(pred, reference)?;
    Ok(Overlap::of(pred.data(), reference.data())?.rvd())
}

/// Dice of all cases pooled into one volume.
pub fn dice_global(cases: &[Overlap]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("global Dice needs at least one case".into()));
    }
    let inter: usize = cases.iter().map(|o| o.intersection).sum();
    let denom: usize = cases.iter().map(|o| o.pred + o.reference).sum();
    Ok(if denom == 0 { 1.0 } else { 2.0 * inter as f64 / denom as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub overlap: Overlap,
    pub dice: f64,
    pub voe: f64,
    pub rvd: Option<f64>,
    pub assd_mm: Option<f64>,
    pub msd_mm: Option<f64>,
    pub rmsd_mm: Option<f64>,
}

impl ClassMetrics {
    pub fn compute(pred: &Volume<bool>, reference: &Volume<bool>) -> Result<Self> {
        check_dims(pred, reference)?;
        let overlap = Overlap::of(pred.data(), reference.data())?;
        let sd = surface_distances(pred, reference)?;
        Ok(ClassMetrics {
            overlap,
            dice: overlap.dice(),
            voe: overlap.voe(),
            rvd: overlap.rvd(),
            assd_mm: sd.map(|d| d.assd),
            msd_mm: sd.map(|d| d.msd),
            rmsd_mm: sd.map(|d| d.rmsd),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Organ,
    Lesion,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Organ, Class::Lesion];

    pub fn mask(self, labels: &Volume<u8>) -> Volume<bool> {
        match self {
            Class::Organ => labels.map(|l| l == 1 || l == 2),
            Class::Lesion => labels.map(|l| l == 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Organ => "organ",
            Class::Lesion => "lesion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub organ: ClassMetrics,
    pub lesion: ClassMetrics,
}

impl CaseMetrics {
    /// Scores a label prediction against its reference; distances use the
    /// reference spacing.
    pub fn compute(id: impl Into<String>, pred: &Volume<u8>, reference: &Volume<u8>) -> Result<Self> {
        if pred.dims() != reference.dims() {
            return Err(shape_err!("prediction {:?} and reference {:?} differ", pred.dims(), reference.dims()));
        }
        let pred = Volume::new(pred.dims(), reference.spacing(), pred.data().to_vec())?;
        let score = |c: Class| ClassMetrics::compute(&c.mask(&pred), &c.mask(reference));
        Ok(CaseMetrics {
            id: id.into(),
            organ: score(Class::Organ)?,
            lesion: score(Class::Lesion)?,
        })
    }

    pub fn class(&self, c: Class) -> &ClassMetrics {
        match c {
            Class::Organ => &self.organ,
            Class::Lesion => &self.lesion,
        }
    }
}

/// Mean over the defined values, `None` when there are none.
fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub dice_per_case: f64,
    /// Sample standard deviation; absent for a single case.
    pub dice_per_case_sd: Option<f64>,
    pub dice_global: f64,
    pub voe: f64,
    pub rvd: Option<f64>,
    pub assd_mm: Option<f64>,
    pub msd_mm: Option<f64>,
    pub rmsd_mm: Option<f64>,
}

impl ClassSummary {
    fn of(cases: &[CaseMetrics], c: Class) -> Result<Self> {
        let m: Vec<&ClassMetrics> = cases.iter().map(|k| k.class(c)).collect();
        let dices: Vec<f64> = m.iter().map(|x| x.dice).collect();
        let overlaps: Vec<Overlap> = m.iter().map(|x| x.overlap).collect();
        Ok(ClassSummary {
            dice_per_case: dices.iter().mean(),
            dice_per_case_sd: (dices.len() > 1).then(|| dices.iter().std_dev()),
            dice_global: dice_global(&overlaps)?,
            voe: m.iter().map(|x| x.voe).mean(),
            rvd: mean_defined(m.iter().map(|x| x.rvd)),
            assd_mm: mean_defined(m.iter().map(|x| x.assd_mm)),
            msd_mm: mean_defined(m.iter().map(|x| x.msd_mm)),
            rmsd_mm: mean_defined(m.iter().map(|x| x.rmsd_mm)),
        })
    }
}

/// Per-case metrics plus their aggregate; `missing` lists cases without a
/// prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub cases: Vec<CaseMetrics>,
    pub missing: Vec<String>,
    pub organ: ClassSummary,
    pub lesion: ClassSummary,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl AggregateReport {
    pub fn new(cases: Vec<CaseMetrics>, missing: Vec<String>) -> Result<Self> {
        Ok(AggregateReport {
            organ: ClassSummary::of(&cases, Class::Organ)?,
            lesion: ClassSummary::of(&cases, Class::Lesion)?,
            cases,
            missing,
        })
    }

    pub fn summary(&self, c: Class) -> &ClassSummary {
        match c {
            Class::Organ => &self.organ,
            Class::Lesion => &self.lesion,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    /// Fixed-layout text: one row per case and class, then the aggregate.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# per case");
        let _ = writeln!(s, "case\tclass\tdice\tvoe\trvd\tassd_mm\tmsd_mm\trmsd_mm");
        for case in &self.cases {
            for c in Class::ALL {
                let m = case.class(c);
                let _ = writeln!(
                    s,
                    "{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
                    case.id,
                    c.name(),
                    m.dice,
                    m.voe,
                    opt(m.rvd),
                    opt(m.assd_mm),
                    opt(m.msd_mm),
                    opt(m.rmsd_mm)
                );
            }
        }
        let _ = writeln!(s, "\n# aggregate over {} cases", self.cases.len());
        let _ = writeln!(s, "class\tdice_per_case\tsd\tdice_global\tvoe\trvd\tassd_mm\tmsd_mm\trmsd_mm");
        for c in Class::ALL {
            let a = self.summary(c);
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
                c.name(),
                a.dice_per_case,
                opt(a.dice_per_case_sd),
                a.dice_global,
                a.voe,
                opt(a.rvd),
                opt(a.assd_mm),
                opt(a.msd_mm),
                opt(a.rmsd_mm)
            );
        }
        if !self.missing.is_empty() {
            let _ = writeln!(s, "\n# missing predictions\n{}", self.missing.join("\n"));
        }
        s
    }
}
