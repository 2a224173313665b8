//! Path-qualified extraction of numeric tables from JSON values.

use serde_json::Value;

use crate::error::{Error, Result};

pub(crate) fn field<'a>(obj: &'a Value, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::config(format!("{path}/{key}"), "missing field"))
}

pub(crate) fn count(v: &Value, path: &str) -> Result<usize> {
    match v.as_u64() {
        Some(n) if n >= 1 => Ok(n as usize),
        _ => Err(Error::config(path, format!("expected a positive integer, got {v}"))),
    }
}

pub(crate) fn reject_unknown(obj: &Value, path: &str, known: &[&str]) -> Result<()> {
    let map = obj
        .as_object()
        .ok_or_else(|| Error::config(path, "expected an object"))?;
    for key in map.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::config(format!("{path}/{key}"), "unknown field"));
        }
    }
    Ok(())
}

fn array<'a>(v: &'a Value, path: &str, len: usize) -> Result<&'a Vec<Value>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::config(path, "expected an array"))?;
    if arr.len() != len {
        return Err(Error::config(
            path,
            format!("expected length {len}, found {}", arr.len()),
        ));
    }
    Ok(arr)
}

fn number(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::config(path, format!("expected a finite number, got {v}")))
}

/// Flattens a JSON array of the given shape in row-major order.
pub(crate) fn table(v: &Value, path: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dims.iter().product());
    walk(v, path, dims, &mut out)?;
    Ok(out)
}

fn walk(v: &Value, path: &str, dims: &[usize], out: &mut Vec<f64>) -> Result<()> {
    match dims.split_first() {
        None => {
            out.push(number(v, path)?);
            Ok(())
        }
        Some((&len, rest)) => {
            for (i, item) in array(v, path, len)?.iter().enumerate() {
                walk(item, &format!("{path}/{i}"), rest, out)?;
            }
            Ok(())
        }
    }
}

/// Flattens an array of non-negative integers, each `< bound`.
pub(crate) fn index_table(v: &Value, path: &str, dims: &[usize], bound: usize) -> Result<Vec<usize>> {
    let flat = table(v, path, dims)?;
    let mut out = Vec::with_capacity(flat.len());
    for (k, x) in flat.into_iter().enumerate() {
        if x < 0.0 || x.fract() != 0.0 || x as usize >= bound {
            return Err(Error::config(
                format!("{path}[{k}]"),
                format!("expected an integer index below {bound}, got {x}"),
            ));
        }
        out.push(x as usize);
    }
    Ok(out)
}

/// Nests a flat row-major table back into JSON arrays.
pub(crate) fn nest(flat: &[f64], dims: &[usize]) -> Value {
    match dims.split_first() {
        None => Value::from(flat[0]),
        Some((&len, rest)) => {
            let stride: usize = rest.iter().product();
            Value::Array(
                (0..len)
                    .map(|i| nest(&flat[i * stride..(i + 1) * stride], rest))
                    .collect(),
            )
        }
    }
}
