use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Writes one `x y z` line per point with six decimals.
pub fn write_xyz<T: Scalar, W: Write>(points: &Tensor<T>, mut out: W) -> Result<()> {
    for i in 0..points.rows() {
        let p = points.row(i);
        writeln!(
            out,
            "{:.6} {:.6} {:.6}",
            p[0].as_f64(),
            p[1].as_f64(),
            p[2].as_f64()
        )?;
    }
    Ok(())
}

pub fn read_xyz<T: Scalar, R: BufRead>(input: R) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 3 {
            return Err(Error::Data(format!(
                "line {}: expected 3 values, got {}",
                lineno + 1,
                vals.len()
            )));
        }
        data.extend(vals.into_iter().map(T::of));
    }
    Tensor::new(&[data.len() / 3, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_format() {
        let t = Tensor::<f64>::new(&[2, 3], vec![0.5, -1.0, 2.0, 1.0 / 3.0, 0.0, 1e-7]).unwrap();
        let mut buf = Vec::new();
        write_xyz(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "0.500000 -1.000000 2.000000\n0.333333 0.000000 0.000000\n");
        let back: Tensor<f64> = read_xyz(buf.as_slice()).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
        assert!(read_xyz::<f64, _>("1 2\n".as_bytes()).is_err());
    }
}
