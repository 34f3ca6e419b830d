//! Log-domain arithmetic and dense matrix text I/O shared across modules.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1, ArrayViewMut1};

use crate::error::FormatError;

/// `ln(exp(a) + exp(b))` without overflow; `-inf` is the additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Log-sum-exp over an iterator of log values.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Overwrites `row` with its log-softmax.
pub fn log_softmax_in_place(mut row: ArrayViewMut1<f64>) {
    let z = log_sum_exp(row.iter().cloned());
    row.mapv_inplace(|x| x - z);
}

/// Softmax of a row as a new vector.
pub fn softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let z = log_sum_exp(row.iter().cloned());
    row.iter().map(|&x| (x - z).exp()).collect()
}

/// `ln(1 + e^x)` computed without overflow for large `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Compensated (Neumaier) summation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Formats a double with 17 significant digits, enough to round-trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Writes a matrix as a `rows cols` header followed by one row per line.
pub fn write_matrix<W: Write>(out: &mut W, m: &Array2<f64>) -> std::io::Result<()> {
    writeln!(out, "{} {}", m.nrows(), m.ncols())?;
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads one matrix in the format produced by [`write_matrix`].
///
/// Returns `Ok(None)` at clean end of input so that several matrices can be
/// concatenated in one stream.
pub fn read_matrix<R: BufRead>(input: &mut R) -> Result<Option<Array2<f64>>, FormatError> {
    let mut header = String::new();
    loop {
        header.clear();
        if input.read_line(&mut header)? == 0 {
            return Ok(None);
        }
        if !header.trim().is_empty() {
            break;
        }
    }
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| FormatError::Malformed(format!("bad matrix header: {}", header.trim())))?;
    if dims.len() != 2 {
        return Err(FormatError::Malformed(format!("bad matrix header: {}", header.trim())));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    let mut line = String::new();
    for r in 0..rows {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(FormatError::Malformed(format!("matrix truncated at row {}", r)));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| FormatError::Malformed(format!("bad number {:?}", tok)))?,
            );
        }
        if data.len() - before != cols {
            return Err(FormatError::Malformed(format!(
                "row {} has {} entries, expected {}",
                r,
                data.len() - before,
                cols
            )));
        }
    }
    Array2::from_shape_vec((rows, cols), data)
        .map(Some)
        .map_err(|e| FormatError::Malformed(e.to_string()))
}
