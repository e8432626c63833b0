//! Artifact serialization. JSON objects are written with sorted keys and
//! floats in shortest round-trip form, so equal values give equal bytes.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Pretty JSON with keys sorted at every level, newline-terminated.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let tree = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&tree)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Sample {
        zeta: f64,
        alpha: Vec<f64>,
    }

    #[test]
    fn keys_are_sorted_and_floats_round_trip() {
        let text = to_json(&Sample { zeta: 0.1, alpha: vec![1.0 / 3.0, 1e-300] }).unwrap();
        assert!(text.find("alpha").unwrap() < text.find("zeta").unwrap());
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["alpha"][0].as_f64().unwrap(), 1.0 / 3.0);
        assert_eq!(back["alpha"][1].as_f64().unwrap(), 1e-300);
        assert_eq!(text, to_json(&Sample { zeta: 0.1, alpha: vec![1.0 / 3.0, 1e-300] }).unwrap());
    }
}
