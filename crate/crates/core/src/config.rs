//! TOML problem files.
//!
//! ```toml
//! T = 1.0
//! n = 1
//! m = 1
//! sigma_bar_sq = 1.0
//! sigma_low_sq = 0.5
//! x0 = [1.0]
//! L = [[1.0]]
//! A = [[0.0]]              # constant coefficient, rows of the matrix
//! B_tilde = [[1.0]]
//! C = [[0.0]]
//! D = [[0.0]]
//! R = [[1.0]]
//!
//! [Q]                      # piecewise-constant coefficient
//! times = [0.0, 0.5]       # start of each piece, ascending, first = 0
//! values = [[[1.0]], [[2.0]]]
//! ```
//!
//! `b`, `sigma` and `S` default to zero. A bare number is accepted for a
//! 1×1 matrix or a length-1 vector.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::problem::{AmbiguityBounds, LQProblem, MatrixFn, Piecewise, VectorFn};

/// Parses a problem file; see the module docs for the schema.
pub fn load_problem(text: &str) -> Result<LQProblem> {
    let table: Table = toml::from_str(text).map_err(|e| {
        let location = match e.span() {
            Some(span) => line_col(text, span.start),
            None => "unknown".to_string(),
        };
        Error::Parse {
            location,
            message: e.message().to_string(),
        }
    })?;

    let known = [
        "T", "n", "m", "sigma_bar_sq", "sigma_low_sq", "x0", "L", "A", "B_tilde", "C", "D", "b",
        "sigma", "Q", "S", "R",
    ];
    if let Some(k) = table.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(field_error(k, "unknown field"));
    }

    let horizon = req_f64(&table, "T")?;
    let n = req_usize(&table, "n")?;
    let m = req_usize(&table, "m")?;
    let bounds = AmbiguityBounds::new(req_f64(&table, "sigma_bar_sq")?, req_f64(&table, "sigma_low_sq")?)
        .map_err(|e| field_error("sigma_low_sq", &e.to_string()))?;

    let matrix_fn = |name: &str, rows: usize, cols: usize, required: bool| -> Result<MatrixFn> {
        match table.get(name) {
            None if required => Err(field_error(name, "missing required coefficient")),
            None => Ok(Piecewise::constant(DMatrix::zeros(rows, cols))),
            Some(v) => coefficient(name, v, |path, v| matrix(path, v, rows, cols)),
        }
    };
    let vector_fn = |name: &str| -> Result<VectorFn> {
        match table.get(name) {
            None => Ok(Piecewise::constant(DVector::zeros(n))),
            Some(v) => coefficient(name, v, |path, v| vector(path, v, n)),
        }
    };

    let p = LQProblem {
        horizon,
        n,
        m,
        a: matrix_fn("A", n, n, true)?,
        b_tilde: matrix_fn("B_tilde", n, m, true)?,
        c: matrix_fn("C", n, n, true)?,
        d: matrix_fn("D", n, m, true)?,
        b: vector_fn("b")?,
        sigma: vector_fn("sigma")?,
        q: matrix_fn("Q", n, n, true)?,
        s: matrix_fn("S", m, n, false)?,
        r: matrix_fn("R", m, m, true)?,
        l: matrix(
            "L",
            table.get("L").ok_or_else(|| field_error("L", "missing required coefficient"))?,
            n,
            n,
        )?,
        x0: vector(
            "x0",
            table.get("x0").ok_or_else(|| field_error("x0", "missing required field"))?,
            n,
        )?,
        bounds,
    };
    p.check_dimensions()?;
    Ok(p)
}

/// Canonical text form; `load_problem(to_config_string(p)) == p` bit for bit.
pub fn to_config_string(p: &LQProblem) -> String {
    let mut s = String::new();
    writeln!(s, "T = {}", num(p.horizon)).unwrap();
    writeln!(s, "n = {}", p.n).unwrap();
    writeln!(s, "m = {}", p.m).unwrap();
    writeln!(s, "sigma_bar_sq = {}", num(p.bounds.sigma_bar_sq())).unwrap();
    writeln!(s, "sigma_low_sq = {}", num(p.bounds.sigma_low_sq())).unwrap();
    writeln!(s, "x0 = {}", vec_text(&p.x0)).unwrap();
    writeln!(s, "L = {}", mat_text(&p.l)).unwrap();
    let mats = [
        ("A", &p.a),
        ("B_tilde", &p.b_tilde),
        ("C", &p.c),
        ("D", &p.d),
        ("Q", &p.q),
        ("S", &p.s),
        ("R", &p.r),
    ];
    let vecs = [("b", &p.b), ("sigma", &p.sigma)];
    // constants first: they are top-level keys and must precede any [table]
    for (name, f) in mats.iter().filter(|(_, f)| f.is_constant()) {
        writeln!(s, "{name} = {}", mat_text(&f.values()[0])).unwrap();
    }
    for (name, f) in vecs.iter().filter(|(_, f)| f.is_constant()) {
        writeln!(s, "{name} = {}", vec_text(&f.values()[0])).unwrap();
    }
    for (name, f) in mats.iter().filter(|(_, f)| !f.is_constant()) {
        let vals: Vec<String> = f.values().iter().map(mat_text).collect();
        write_table(&mut s, name, f.starts(), &vals);
    }
    for (name, f) in vecs.iter().filter(|(_, f)| !f.is_constant()) {
        let vals: Vec<String> = f.values().iter().map(vec_text).collect();
        write_table(&mut s, name, f.starts(), &vals);
    }
    s
}

fn write_table(s: &mut String, name: &str, starts: &[f64], vals: &[String]) {
    let times: Vec<String> = starts.iter().map(|t| num(*t)).collect();
    writeln!(s, "\n[{name}]").unwrap();
    writeln!(s, "times = [{}]", times.join(", ")).unwrap();
    writeln!(s, "values = [{}]", vals.join(", ")).unwrap();
}

/// Shortest round-trip float literal that TOML accepts.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn vec_text(v: &DVector<f64>) -> String {
    let xs: Vec<String> = v.iter().map(|x| num(*x)).collect();
    format!("[{}]", xs.join(", "))
}

fn mat_text(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let xs: Vec<String> = (0..m.ncols()).map(|j| num(m[(i, j)])).collect();
            format!("[{}]", xs.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn line_col(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    format!("line {line}, column {col}")
}

fn field_error(field: &str, message: &str) -> Error {
    Error::Parse {
        location: format!("field `{field}`"),
        message: message.to_string(),
    }
}

fn as_f64(path: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(field_error(path, "expected a number")),
    }
}

fn req_f64(t: &Table, key: &str) -> Result<f64> {
    as_f64(key, t.get(key).ok_or_else(|| field_error(key, "missing required field"))?)
}

fn req_usize(t: &Table, key: &str) -> Result<usize> {
    match t.get(key) {
        Some(Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
        Some(_) => Err(field_error(key, "expected a nonnegative integer")),
        None => Err(field_error(key, "missing required field")),
    }
}

fn coefficient<T>(
    name: &str,
    v: &Value,
    parse: impl Fn(&str, &Value) -> Result<T>,
) -> Result<Piecewise<T>> {
    match v {
        Value::Table(t) => {
            if let Some(k) = t.keys().find(|k| !["value", "times", "values"].contains(&k.as_str())) {
                return Err(field_error(&format!("{name}.{k}"), "unknown field"));
            }
            if let Some(value) = t.get("value") {
                return Ok(Piecewise::constant(parse(&format!("{name}.value"), value)?));
            }
            let times = t
                .get("times")
                .and_then(Value::as_array)
                .ok_or_else(|| field_error(&format!("{name}.times"), "expected an array of times"))?;
            let values = t
                .get("values")
                .and_then(Value::as_array)
                .ok_or_else(|| field_error(&format!("{name}.values"), "expected an array of values"))?;
            if times.len() != values.len() {
                return Err(Error::DimensionMismatch {
                    name: name.to_string(),
                    expected: format!("{} values (one per time)", times.len()),
                    found: format!("{} values", values.len()),
                });
            }
            let starts = times
                .iter()
                .enumerate()
                .map(|(i, x)| as_f64(&format!("{name}.times[{i}]"), x))
                .collect::<Result<Vec<_>>>()?;
            let vals = values
                .iter()
                .enumerate()
                .map(|(i, x)| parse(&format!("{name}.values[{i}]"), x))
                .collect::<Result<Vec<_>>>()?;
            Piecewise::new(starts, vals).map_err(|e| field_error(&format!("{name}.times"), &e.to_string()))
        }
        other => Ok(Piecewise::constant(parse(name, other)?)),
    }
}

fn matrix(path: &str, v: &Value, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mismatch = |found: String| Error::DimensionMismatch {
        name: path.to_string(),
        expected: format!("{rows}x{cols}"),
        found,
    };
    if let Ok(x) = as_f64(path, v) {
        return if rows == 1 && cols == 1 {
            Ok(DMatrix::from_element(1, 1, x))
        } else {
            Err(mismatch("scalar".into()))
        };
    }
    let outer = v.as_array().ok_or_else(|| field_error(path, "expected an array of rows"))?;
    if outer.len() != rows {
        let c = outer.first().and_then(Value::as_array).map_or(0, |r| r.len());
        return Err(mismatch(format!("{}x{}", outer.len(), c)));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, row) in outer.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| field_error(&format!("{path}[{i}]"), "expected a row array"))?;
        if row.len() != cols {
            return Err(mismatch(format!("{}x{} (row {i})", rows, row.len())));
        }
        for (j, x) in row.iter().enumerate() {
            m[(i, j)] = as_f64(&format!("{path}[{i}][{j}]"), x)?;
        }
    }
    Ok(m)
}

fn vector(path: &str, v: &Value, len: usize) -> Result<DVector<f64>> {
    if let Ok(x) = as_f64(path, v) {
        return if len == 1 {
            Ok(DVector::from_element(1, x))
        } else {
            Err(Error::DimensionMismatch {
                name: path.to_string(),
                expected: format!("length {len}"),
                found: "scalar".into(),
            })
        };
    }
    let arr = v.as_array().ok_or_else(|| field_error(path, "expected an array"))?;
    if arr.len() != len {
        return Err(Error::DimensionMismatch {
            name: path.to_string(),
            expected: format!("length {len}"),
            found: format!("length {}", arr.len()),
        });
    }
    let xs = arr
        .iter()
        .enumerate()
        .map(|(i, x)| as_f64(&format!("{path}[{i}]"), x))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(xs))
}
