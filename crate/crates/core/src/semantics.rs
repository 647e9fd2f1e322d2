//! Dense semantic embedding matrices: binary persistence, dimensionality
//! reduction for embedding-table initialization, and the semantic-ID TSV
//! format.
//!
//! The embedding binary layout is `SEMB` magic, little-endian u32 count,
//! u32 dim, then count*dim little-endian f32 values row-major.

#![allow(clippy::needless_range_loop)]

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantizer::{Mechanism, SidAssignment};

pub const SEMB_MAGIC: &[u8; 4] = b"SEMB";

#[derive(Clone, Debug)]
pub struct SemanticMatrix {
    n_items: usize,
    dim: usize,
    data: Vec<f32>,
}

impl SemanticMatrix {
    pub fn new(n_items: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_items * dim {
            return Err(Error::Shape(format!(
                "embedding data has {} values, expected {}x{}",
                data.len(),
                n_items,
                dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("embedding matrix contains NaN/Inf".into()));
        }
        Ok(SemanticMatrix { n_items, dim, data })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parse a SEMB embedding file. When `expected_items` is given, a count
/// mismatch against the catalog is an error.
pub fn parse_semantic_matrix(
    mut r: impl Read,
    expected_items: Option<usize>,
) -> Result<SemanticMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &magic != SEMB_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected SEMB",
            magic
        )));
    }
    let count =
        read_u32(&mut r).map_err(|e| Error::Format(format!("truncated count: {e}")))? as usize;
    let dim = read_u32(&mut r).map_err(|e| Error::Format(format!("truncated dim: {e}")))? as usize;
    if count == 0 || dim == 0 {
        return Err(Error::Format(format!("degenerate shape {count}x{dim}")));
    }
    if let Some(exp) = expected_items {
        if count != exp {
            return Err(Error::Shape(format!(
                "embedding count {count} does not match catalog size {exp}"
            )));
        }
    }
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("count*dim overflows".into()))?;
    if n > (1 << 31) {
        return Err(Error::Format(format!("embedding too large: {count}x{dim}")));
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    SemanticMatrix::new(count, dim, data)
}

pub fn load_semantic_matrix(
    path: impl AsRef<Path>,
    expected_items: Option<usize>,
) -> Result<SemanticMatrix> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_semantic_matrix(BufReader::new(f), expected_items)
}

pub fn save_semantic_matrix(m: &SemanticMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        w.write_all(SEMB_MAGIC)?;
        w.write_all(&(m.n_items as u32).to_le_bytes())?;
        w.write_all(&(m.dim as u32).to_le_bytes())?;
        for v in &m.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Mean-centered truncated-SVD projection, rescaled for embedding-table
/// initialization (per-column standard deviation <= 1).
#[derive(Clone, Debug)]
pub struct ReducedMatrix {
    pub n_items: usize,
    pub d: usize,
    /// [n_items, d] projected rows.
    pub data: Vec<f32>,
    /// [d_llm, d] right singular vectors (projection basis), row-major.
    pub basis: Vec<f32>,
    /// Divisor applied to the projection (sigma_max / sqrt(n)).
    pub scale: f32,
    /// Explained-variance fraction per kept component, non-increasing.
    pub explained: Vec<f64>,
    /// Column means subtracted before projection, length d_llm.
    pub mean: Vec<f32>,
}

impl ReducedMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// One-sided Jacobi SVD: orthogonalizes the columns of `x` (n x m, row-major,
/// mutated in place) and accumulates the right singular vectors into `v`
/// (m x m row-major, starts as identity). Returns squared column norms.
fn hestenes_jacobi(x: &mut [f64], n: usize, m: usize, v: &mut [f64]) -> Vec<f64> {
    const MAX_SWEEPS: usize = 40;
    const TOL: f64 = 1e-14;
    for sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..n {
                    let xp = x[i * m + p];
                    let xq = x[i * m + q];
                    app += xp * xp;
                    aqq += xq * xq;
                    apq += xp * xq;
                }
                if apq.abs() <= TOL * (app * aqq).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let xp = x[i * m + p];
                    let xq = x[i * m + q];
                    x[i * m + p] = c * xp - s * xq;
                    x[i * m + q] = s * xp + c * xq;
                }
                for i in 0..m {
                    let vp = v[i * m + p];
                    let vq = v[i * m + q];
                    v[i * m + p] = c * vp - s * vq;
                    v[i * m + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated && sweep > 0 {
            break;
        }
    }
    (0..m)
        .map(|j| (0..n).map(|i| x[i * m + j] * x[i * m + j]).sum())
        .collect()
}

/// Project onto the top-d right singular directions of the mean-centered
/// matrix. Columns come out ordered by descending explained variance; each
/// singular vector's largest-magnitude element is made positive; the result
/// is divided by sigma_max / sqrt(n) so per-column standard deviation <= 1.
pub fn reduce_dims(m: &SemanticMatrix, d: usize) -> Result<ReducedMatrix> {
    let (n, dl) = (m.n_items, m.dim);
    if d == 0 || d > dl {
        return Err(Error::InvalidArg(format!(
            "reduced dim {d} must lie in [1, {dl}]"
        )));
    }
    let mut mean = vec![0.0f64; dl];
    for i in 0..n {
        for j in 0..dl {
            mean[j] += m.data[i * dl + j] as f64;
        }
    }
    for mu in &mut mean {
        *mu /= n as f64;
    }
    let mut xc = vec![0.0f64; n * dl];
    for i in 0..n {
        for j in 0..dl {
            xc[i * dl + j] = m.data[i * dl + j] as f64 - mean[j];
        }
    }
    let centered = xc.clone();

    let mut v = vec![0.0f64; dl * dl];
    for j in 0..dl {
        v[j * dl + j] = 1.0;
    }
    let sq_norms = hestenes_jacobi(&mut xc, n, dl, &mut v);

    // Order components by descending singular value, ties by column index.
    let mut order: Vec<usize> = (0..dl).collect();
    order.sort_by(|&a, &b| sq_norms[b].total_cmp(&sq_norms[a]).then(a.cmp(&b)));
    let total_var: f64 = sq_norms.iter().sum();
    let sigma_max = sq_norms[order[0]].sqrt();

    // Basis with the sign convention applied.
    let mut basis = vec![0.0f64; dl * d];
    for (col, &src) in order.iter().take(d).enumerate() {
        let mut best = 0.0f64;
        let mut flip = false;
        for i in 0..dl {
            let val = v[i * dl + src];
            if val.abs() > best.abs() {
                best = val;
                flip = val < 0.0;
            }
        }
        let sign = if flip { -1.0 } else { 1.0 };
        for i in 0..dl {
            basis[i * d + col] = sign * v[i * dl + src];
        }
    }

    let scale = if sigma_max > 0.0 {
        sigma_max / (n as f64).sqrt()
    } else {
        1.0
    };
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        for col in 0..d {
            let mut acc = 0.0f64;
            for j in 0..dl {
                acc += centered[i * dl + j] * basis[j * d + col];
            }
            out[i * d + col] = (acc / scale) as f32;
        }
    }
    let explained: Vec<f64> = order
        .iter()
        .take(d)
        .map(|&j| {
            if total_var > 0.0 {
                sq_norms[j] / total_var
            } else {
                0.0
            }
        })
        .collect();
    Ok(ReducedMatrix {
        n_items: n,
        d,
        data: out,
        basis: basis.iter().map(|&x| x as f32).collect(),
        scale: scale as f32,
        explained,
        mean: mean.iter().map(|&x| x as f32).collect(),
    })
}

fn mech_str(m: Mechanism) -> &'static str {
    match m {
        Mechanism::Vq => "vq",
        Mechanism::Pq => "pq",
        Mechanism::Rq => "rq",
    }
}

fn mech_from_str(s: &str) -> Result<Mechanism> {
    match s {
        "vq" => Ok(Mechanism::Vq),
        "pq" => Ok(Mechanism::Pq),
        "rq" => Ok(Mechanism::Rq),
        other => Err(Error::Format(format!("unknown mechanism '{other}'"))),
    }
}

/// TSV with a `#L=<L> K=<K> mech=<vq|pq|rq>` header, then one row per item:
/// `item_index<TAB>c1<TAB>...<TAB>cL`.
pub fn write_sids(assign: &SidAssignment, mut w: impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "#L={} K={} mech={}",
        assign.levels,
        assign.k_codes,
        mech_str(assign.mechanism)
    )?;
    for i in 0..assign.n_items() {
        write!(w, "{i}")?;
        for &c in assign.codes_of(i) {
            write!(w, "\t{c}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_sids(assign: &SidAssignment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_sids(assign, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn parse_sids(r: impl Read) -> Result<SidAssignment> {
    let buf = BufReader::new(r);
    let mut lines = buf.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Empty("no items".into()))?;
    let header = header.map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("missing #L=.. header".into()))?;
    let mut levels = None;
    let mut k_codes = None;
    let mut mech = None;
    for part in header.split_whitespace() {
        if let Some(v) = part.strip_prefix("L=") {
            levels = Some(
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad L value '{v}'")))?,
            );
        } else if let Some(v) = part.strip_prefix("K=") {
            k_codes = Some(
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad K value '{v}'")))?,
            );
        } else if let Some(v) = part.strip_prefix("mech=") {
            mech = Some(mech_from_str(v)?);
        }
    }
    let levels = levels.ok_or_else(|| Error::Format("header missing L".into()))?;
    let k_codes = k_codes.ok_or_else(|| Error::Format("header missing K".into()))?;
    let mech = mech.ok_or_else(|| Error::Format("header missing mech".into()))?;
    if levels == 0 || k_codes == 0 {
        return Err(Error::Format("L and K must be positive".into()));
    }

    let mut codes: Vec<u32> = Vec::new();
    let mut expected_item = 0usize;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let item: usize = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| Error::Parse {
                line: lineno,
                msg: "item index is not an integer".into(),
            })?;
        if item != expected_item {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected item {expected_item}, found {item}"),
            });
        }
        let row: Vec<u32> = parts
            .map(|p| {
                p.trim().parse::<u32>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: "code is not an integer".into(),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != levels {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} codes, found {}", levels, row.len()),
            });
        }
        for &c in &row {
            if c as usize >= k_codes {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("code {c} out of range [0, {k_codes})"),
                });
            }
        }
        codes.extend_from_slice(&row);
        expected_item += 1;
    }
    if expected_item == 0 {
        return Err(Error::Empty("no items".into()));
    }
    Ok(SidAssignment::new(mech, levels, k_codes, codes))
}

pub fn load_sids(path: impl AsRef<Path>) -> Result<SidAssignment> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_sids(BufReader::new(f))
}
