//! Canonical JSON: sorted object keys, two-space indentation, and every float
//! written with 17 significant digits so that reports diff cleanly and are
//! byte-identical across runs.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;

struct Canonical<'a>(PrettyFormatter<'a>);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(
            fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(w $(, $arg)*)
            }
        )*
    };
}

impl Formatter for Canonical<'_> {
    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    );

    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
}

/// Serialize through `Value` (whose maps are ordered by key) and format.
/// Non-finite floats become `null`.
pub fn to_canonical<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v: Value = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Canonical(PrettyFormatter::with_indent(b"  ")));
    v.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("JSON is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_floats_fixed() {
        #[derive(Serialize)]
        struct S {
            zeta: f64,
            alpha: u64,
            mid: Vec<f64>,
        }
        let s = to_canonical(&S {
            zeta: 0.1,
            alpha: 3,
            mid: vec![1.0, -2.5e-300],
        })
        .unwrap();
        assert_eq!(
            s,
            "{\n  \"alpha\": 3,\n  \"mid\": [\n    1.0000000000000000e0,\n    -2.5000000000000000e-300\n  ],\n  \"zeta\": 1.0000000000000001e-1\n}\n"
        );
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["zeta"].as_f64(), Some(0.1));
    }

    #[test]
    fn non_finite_is_null() {
        let s = to_canonical(&json!({ "x": f64::NAN })).unwrap();
        assert!(s.contains("null"));
    }
}
