//! Overlap and surface-distance metrics, per-case records and aggregation.
//!
//! Distances are between surface voxel centres in mm. Surface distances use
//! an exact Euclidean distance transform of the other mask's surface, so they
//! agree with an all-pairs search up to rounding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::volio::Mask;

fn check_same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("mask shapes {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Dice coefficient; two empty masks score 1.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    check_same_shape(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.data().iter().zip(b.data.data()) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one background 6-neighbour; outside the
/// grid counts as background.
pub fn surface_voxels(mask: &Mask) -> Vec<[usize; 3]> {
    let g = &mask.data;
    let mut out = Vec::new();
    for (i, &v) in g.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let [x, y, z] = g.coords(i);
        let (x, y, z) = (x as isize, y as isize, z as isize);
        let exposed = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .any(|(dx, dy, dz)| g.get_signed(x + dx, y + dy, z + dz).is_none_or(|n| n == 0));
        if exposed {
            out.push(g.coords(i));
        }
    }
    out
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line,
/// with sample spacing `h`; `f` holds squared distances, INFINITY where no
/// seed.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let mut k: usize = 0;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = q0;
    zb[0] = f64::NEG_INFINITY;
    zb[1] = f64::INFINITY;
    let pos = |i: usize| i as f64 * h;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let inter = |p: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
        let mut s = inter(v[k]);
        // zb[0] is -inf, so this stops at k = 0
        while s <= zb[k] {
            k -= 1;
            s = inter(v[k]);
        }
        k += 1;
        v[k] = q;
        zb[k] = s;
        zb[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while zb[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared physical distance from every voxel to the nearest seed voxel.
fn squared_edt(seeds: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Grid3<f64> {
    let mut g = Grid3::filled(dims, f64::INFINITY);
    for s in seeds {
        g.set(s[0], s[1], s[2], 0.0);
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let maxn = dims.iter().copied().max().unwrap_or(0);
    let (mut line, mut out) = (vec![0.0; maxn], vec![0.0; maxn]);
    let (mut v, mut zb) = (vec![0usize; maxn], vec![0.0; maxn + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        let data = g.data_mut();
        for start in 0..data.len() {
            if (start / strides[axis]) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = data[start + i * strides[axis]];
            }
            edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v[..n], &mut zb[..n + 1]);
            for i in 0..n {
                data[start + i * strides[axis]] = out[i];
            }
        }
    }
    g
}

/// Distance from each surface voxel of `from` to the nearest surface voxel
/// of `to`, in mm.
fn directed_distances(from: &Mask, to: &Mask) -> Result<Vec<f64>> {
    check_same_shape(from, to)?;
    let src = surface_voxels(from);
    let dst = surface_voxels(to);
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptyMask);
    }
    let edt = squared_edt(&dst, to.dims(), to.spacing);
    Ok(src.iter().map(|p| edt.get(p[0], p[1], p[2]).sqrt()).collect())
}

/// Symmetric Hausdorff distance between mask surfaces, in mm.
pub fn hausdorff(a: &Mask, b: &Mask) -> Result<f64> {
    let ab = directed_distances(a, b)?;
    let ba = directed_distances(b, a)?;
    Ok(ab.iter().chain(&ba).copied().fold(0.0, f64::max))
}

/// Average surface distance from `pred` to `gt`, in mm.
pub fn asd(pred: &Mask, gt: &Mask) -> Result<f64> {
    let d = directed_distances(pred, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean over both surfaces of the distance to the other one.
pub fn asd_symmetric(a: &Mask, b: &Mask) -> Result<f64> {
    let ab = directed_distances(a, b)?;
    let ba = directed_distances(b, a)?;
    Ok((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case_id: String,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd_mm: Option<f64>,
    pub asd_mm: Option<f64>,
    pub empty_pred: bool,
    pub empty_gt: bool,
}

pub fn evaluate_case(case_id: &str, pred: &Mask, gt: &Mask) -> Result<MetricsRecord> {
    check_same_shape(pred, gt)?;
    if pred.spacing != gt.spacing {
        return Err(Error::ShapeMismatch(format!("mask spacings {:?} vs {:?}", pred.spacing, gt.spacing)));
    }
    let dsc = dsc(pred, gt)?;
    let (empty_pred, empty_gt) = (pred.is_empty(), gt.is_empty());
    let (hd_mm, asd_mm) = if empty_pred || empty_gt {
        (None, None)
    } else {
        (Some(hausdorff(pred, gt)?), Some(asd(pred, gt)?))
    };
    Ok(MetricsRecord {
        case_id: case_id.to_string(),
        dsc,
        hd_mm,
        asd_mm,
        empty_pred,
        empty_gt,
    })
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub defined: usize,
    pub undefined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut xs = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(v) => xs.push(v),
                None => undefined += 1,
            }
        }
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, defined: 0, undefined };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), defined: xs.len(), undefined }
    }

    /// `mean±std` with `decimals` places; `n/a` when nothing is defined.
    pub fn format(&self, decimals: usize) -> String {
        if self.defined == 0 {
            return "n/a".to_string();
        }
        format!("{:.*}±{:.*}", decimals, self.mean, decimals, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    pub dsc: Summary,
    pub hd_mm: Summary,
    pub asd_mm: Summary,
}

impl MetricSummaries {
    fn of(records: &[&MetricsRecord]) -> Self {
        Self {
            dsc: Summary::of(records.iter().map(|r| Some(r.dsc))),
            hd_mm: Summary::of(records.iter().map(|r| r.hd_mm)),
            asd_mm: Summary::of(records.iter().map(|r| r.asd_mm)),
        }
    }

    /// DSC with 3 decimals, distances with 1.
    pub fn formatted(&self) -> [String; 3] {
        [self.dsc.format(3), self.hd_mm.format(1), self.asd_mm.format(1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub overall: MetricSummaries,
    pub folds: BTreeMap<usize, MetricSummaries>,
    pub cases: Vec<MetricsRecord>,
    /// Fold of each case, in `cases` order; `None` if absent from the map.
    pub case_folds: Vec<Option<usize>>,
}

pub const STD_CONVENTION: &str = "population std (divide by n) over cases with a defined value";

pub fn aggregate(records: &[MetricsRecord], fold_map: &BTreeMap<String, usize>) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let all: Vec<&MetricsRecord> = records.iter().collect();
    let mut by_fold: BTreeMap<usize, Vec<&MetricsRecord>> = BTreeMap::new();
    let case_folds: Vec<Option<usize>> = records.iter().map(|r| fold_map.get(&r.case_id).copied()).collect();
    for (r, f) in records.iter().zip(&case_folds) {
        if let Some(f) = f {
            by_fold.entry(*f).or_default().push(r);
        }
    }
    Ok(AggregateReport {
        overall: MetricSummaries::of(&all),
        folds: by_fold.iter().map(|(f, rs)| (*f, MetricSummaries::of(rs))).collect(),
        cases: records.to_vec(),
        case_folds,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// Per-case table: `case_id,fold,dsc,hd_mm,asd_mm,empty_pred,empty_gt`.
pub fn cases_csv(report: &AggregateReport) -> String {
    let mut s = String::from("case_id,fold,dsc,hd_mm,asd_mm,empty_pred,empty_gt\n");
    for (r, f) in report.cases.iter().zip(&report.case_folds) {
        let fold = f.map_or_else(|| "NA".to_string(), |f| f.to_string());
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{},{}",
            r.case_id,
            fold,
            r.dsc,
            opt(r.hd_mm),
            opt(r.asd_mm),
            r.empty_pred,
            r.empty_gt
        );
    }
    s
}

/// One row per method: `method,dsc,hd_mm,asd_mm` as `mean±std` strings,
/// plus counts of undefined distances.
pub fn summary_csv(rows: &[(String, &AggregateReport)]) -> String {
    let mut s = String::from("method,dsc,hd_mm,asd_mm,n_cases,n_undefined_distance\n");
    for (name, r) in rows {
        let [d, h, a] = r.overall.formatted();
        let _ = writeln!(s, "{name},{d},{h},{a},{},{}", r.cases.len(), r.overall.hd_mm.undefined);
    }
    s
}

/// Aligned text table: method | DSC | HD (mm) | ASD_GT (mm).
pub fn summary_text(rows: &[(String, &AggregateReport)]) -> String {
    let header = ["Method".to_string(), "DSC".into(), "HD (mm)".into(), "ASD_GT (mm)".into()];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|(n, r)| {
            let [d, h, a] = r.overall.formatted();
            [n.clone(), d, h, a]
        })
        .collect();
    let width = |c: usize| {
        body.iter()
            .map(|r| r[c].chars().count())
            .chain([header[c].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let w: Vec<usize> = (0..4).map(width).collect();
    let line = |r: &[String; 4]| {
        let mut s = String::new();
        for c in 0..4 {
            let pad = w[c] - r[c].chars().count();
            if c == 0 {
                let _ = write!(s, "{}{}", r[c], " ".repeat(pad));
            } else {
                let _ = write!(s, "  {}{}", " ".repeat(pad), r[c]);
            }
        }
        s.trim_end().to_string()
    };
    let mut s = format!("# mean±std, {STD_CONVENTION}\n");
    s.push_str(&line(&header));
    s.push('\n');
    s.push_str(&"-".repeat(w.iter().sum::<usize>() + 6));
    s.push('\n');
    for r in &body {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}
