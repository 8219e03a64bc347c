//! Serialization helpers: non-finite numbers are written as the strings
//! `"nan"`, `"inf"` and `"-inf"` so every output stays strict JSON/CSV.

use serde::Serializer;

pub fn ser_f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(tag(*x))
    }
}

pub fn ser_f64_pair<S: Serializer>(x: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeTuple;
    let mut t = s.serialize_tuple(2)?;
    t.serialize_element(&Num(x.0))?;
    t.serialize_element(&Num(x.1))?;
    t.end()
}

pub fn ser_f64_vec<S: Serializer>(x: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(x.iter().map(|&v| Num(v)))
}

/// Wrapper that serializes an `f64` with the non-finite convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Num(pub f64);

impl serde::Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ser_f64(&self.0, s)
    }
}

fn tag(x: f64) -> &'static str {
    if x.is_nan() {
        "nan"
    } else if x > 0.0 {
        "inf"
    } else {
        "-inf"
    }
}

/// CSV cell for a float (full round-trip precision).
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        tag(x).to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_become_strings() {
        let v = serde_json::to_string(&[Num(1.5), Num(f64::NAN), Num(f64::INFINITY), Num(f64::NEG_INFINITY)]).unwrap();
        assert_eq!(v, r#"[1.5,"nan","inf","-inf"]"#);
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(0.1), "0.1");
    }
}
