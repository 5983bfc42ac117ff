//! JSON output with pinned float precision: 17 significant digits for `f64`
//! and 9 for `f32`, enough for an exact round trip either way.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

use crate::error::Result;

struct ExactFloats;

impl Formatter for ExactFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

pub fn to_writer_f64_exact<W: io::Write, T: Serialize + ?Sized>(writer: W, value: &T) -> Result<()> {
    let mut ser = Serializer::with_formatter(writer, ExactFloats);
    value.serialize(&mut ser)?;
    Ok(())
}

pub fn to_string_f64_exact<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    to_writer_f64_exact(&mut buf, value)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_pinned() {
        let s = to_string_f64_exact(&(0.1f64, 0.5f32)).unwrap();
        assert_eq!(s, "[1.0000000000000001e-1,5.00000000e-1]");
        let back: (f64, f32) = serde_json::from_str(&s).unwrap();
        assert_eq!(back, (0.1, 0.5));
    }

    #[test]
    fn awkward_values_round_trip() {
        let xs = [f64::MIN_POSITIVE, 1.0 / 3.0, -2.718281828459045e300, 5e-324];
        let back: Vec<f64> = serde_json::from_str(&to_string_f64_exact(&xs).unwrap()).unwrap();
        assert_eq!(back, xs);
    }
}
