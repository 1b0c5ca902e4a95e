//! Plain (`P2`) PGM masks with maxval 1.

use tvbi::prior::SupportMatrix;
use tvbi::{Error, Result};

pub fn to_pgm(mask: &SupportMatrix) -> String {
    let mut s = format!("P2\n{} {}\n1\n", mask.cols(), mask.rows());
    for i in 0..mask.rows() {
        let row: Vec<&str> = (0..mask.cols()).map(|j| if mask.get(i, j) { "1" } else { "0" }).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Parses a `P2` file; any positive gray level counts as a kept weight.
pub fn from_pgm(text: &str) -> Result<SupportMatrix> {
    let mut tokens = text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Format("not a plain PGM (P2) file".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Format(format!("PGM ends before {what}")))?
            .parse()
            .map_err(|_| Error::Format(format!("PGM {what} is not an integer")))
    };
    let cols = num("width")?;
    let rows = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 {
        return Err(Error::Format("PGM maxval must be positive".into()));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let v = num("pixel")?;
        if v > maxval {
            return Err(Error::Format(format!("PGM pixel {v} exceeds maxval {maxval}")));
        }
        values.push((v > 0) as u8);
    }
    if tokens.next().is_some() {
        return Err(Error::Format("trailing data after PGM pixels".into()));
    }
    SupportMatrix::from_vec(rows, cols, values).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let m = SupportMatrix::from_fn(2, 3, |i, j| i == j);
        let text = to_pgm(&m);
        assert_eq!(text, "P2\n3 2\n1\n1 0 0\n0 1 0\n");
        assert_eq!(from_pgm(&text).unwrap(), m);
    }

    #[test]
    fn comments_and_errors() {
        let m = from_pgm("P2 # mask\n2 1\n# maxval next\n255\n0 17\n").unwrap();
        assert_eq!(m.as_slice(), &[0, 1]);
        assert!(from_pgm("P5\n1 1\n1\n0\n").is_err());
        assert!(from_pgm("P2\n2 2\n1\n0 1 1\n").is_err());
        assert!(from_pgm("P2\n1 1\n1\n2\n").is_err());
    }
}
