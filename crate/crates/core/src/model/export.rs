use crate::diffarray::DiffArray;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Writes a `[T, J, J]` (or `[1, T, J, J]`) adjacency as CSV: a `t,row` prefix
/// followed by the `J` row values, one line per matrix row.
pub fn adjacency_to_csv<S: Scalar>(adj: &DiffArray<S>) -> Result<String> {
    let s = adj.shape();
    let (t, j) = match s {
        [t, a, b] if a == b => (*t, *a),
        [1, t, a, b] if a == b => (*t, *a),
        _ => return Err(Error::dim(format!("adjacency must be [T, J, J], got {s:?}"))),
    };
    let mut out = String::from("t,row");
    for c in 0..j {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    let data = adj.data();
    for ti in 0..t {
        for r in 0..j {
            out.push_str(&format!("{ti},{r}"));
            for c in 0..j {
                out.push_str(&format!(",{}", data[(ti * j + r) * j + c].as_f64()));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parses the CSV written by [`adjacency_to_csv`] back into `[T, J, J]`.
pub fn parse_adjacency_csv(text: &str) -> Result<DiffArray<f64>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::format("adjacency csv", "empty file"))?;
    let j = header.split(',').count().saturating_sub(2);
    if j == 0 || !header.starts_with("t,row") {
        return Err(Error::format("adjacency csv:1", "expected header `t,row,c0,...`"));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (n, line) in lines {
        let ctx = format!("adjacency csv:{}", n + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != j + 2 {
            return Err(Error::format(ctx, format!("expected {} fields, got {}", j + 2, fields.len())));
        }
        let (t_idx, r_idx) = (rows / j, rows % j);
        if fields[0].trim().parse::<usize>().ok() != Some(t_idx) || fields[1].trim().parse::<usize>().ok() != Some(r_idx) {
            return Err(Error::format(ctx, format!("expected indices {t_idx},{r_idx}")));
        }
        for f in &fields[2..] {
            data.push(f.trim().parse::<f64>().map_err(|e| Error::format(ctx.clone(), format!("`{f}`: {e}")))?);
        }
        rows += 1;
    }
    if rows == 0 || rows % j != 0 {
        return Err(Error::format("adjacency csv", format!("{rows} rows is not a multiple of J={j}")));
    }
    DiffArray::new(vec![rows / j, j, j], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let a = DiffArray::<f64>::from_fn(&[3, 4, 4], |i| ((i as f64) * 0.731).sin() / 7.0);
        let back = parse_adjacency_csv(&adjacency_to_csv(&a).unwrap()).unwrap();
        assert_eq!(back, a);
        let f = DiffArray::<f32>::from_fn(&[1, 2, 3, 3], |i| (i as f32) * 0.1);
        let back = parse_adjacency_csv(&adjacency_to_csv(&f).unwrap()).unwrap();
        assert_eq!(back.shape(), &[2, 3, 3]);
        assert_eq!(back.data(), f.to_f64_vec().as_slice());
    }

    #[test]
    fn malformed_csv_rejected() {
        assert!(parse_adjacency_csv("").is_err());
        assert!(parse_adjacency_csv("t,row,c0,c1\n0,0,1,0\n").is_err());
        assert!(parse_adjacency_csv("t,row,c0,c1\n0,0,1,x\n0,1,0,1\n").is_err());
    }
}
