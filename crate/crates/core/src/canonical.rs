//! Canonical JSON: UTF-8, lexicographically sorted object keys, no
//! insignificant whitespace, floats as shortest round-trip decimals.
//!
//! Document digests are SHA-256 over these bytes. Float fields of document
//! types route through the [`finite`] serializers so that NaN and infinities
//! are rejected instead of silently becoming `null`.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

/// Encodes any serializable document canonically.
pub fn canonical_encode<T: Serialize + ?Sized>(doc: &T) -> Result<Vec<u8>> {
    let value = serde_json::to_value(doc).map_err(|e| Error::Encoding(e.to_string()))?;
    encode_value(&value)
}

/// Encodes an already-built JSON tree canonically.
pub fn encode_value(value: &Value) -> Result<Vec<u8>> {
    // `serde_json::Map` is a BTreeMap (no `preserve_order`), so keys come out
    // sorted; compact output has no whitespace.
    serde_json::to_vec(value).map_err(|e| Error::Encoding(e.to_string()))
}

pub fn canonical_digest<T: Serialize + ?Sized>(doc: &T) -> Result<String> {
    Ok(sha256_hex(&canonical_encode(doc)?))
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    Ok(serde_json::from_slice(bytes)?)
}

/// `serialize_with` helpers that refuse non-finite floats.
pub mod finite {
    use serde::ser::SerializeSeq;
    use serde::Serializer;

    fn check<E: serde::ser::Error>(v: f64) -> Result<f64, E> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(E::custom(format!("non-finite float {v}")))
        }
    }

    pub fn f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(check(*v)?)
    }

    pub fn opt<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(&check::<S::Error>(*v)?),
            None => s.serialize_none(),
        }
    }

    pub fn vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&check::<S::Error>(*x)?)?;
        }
        seq.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[test]
    fn keys_are_sorted_without_whitespace() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": 2}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(encode_value(&a).unwrap(), encode_value(&b).unwrap());
        assert_eq!(encode_value(&a).unwrap(), br#"{"a":2,"b":1}"#);
        let nested: Value = serde_json::from_str(r#"{"z":{"y":[1,{"b":0,"a":0}]},"é":true}"#).unwrap();
        assert_eq!(
            encode_value(&nested).unwrap(),
            r#"{"z":{"y":[1,{"a":0,"b":0}]},"é":true}"#.as_bytes()
        );
    }

    #[test]
    fn float_rendering_round_trips() {
        let bytes = canonical_encode(&0.1f64).unwrap();
        assert_eq!(bytes, b"0.1");
        let back: f64 = decode(&bytes).unwrap();
        assert_eq!(back.to_bits(), 0.1f64.to_bits());
    }

    #[derive(Serialize, Deserialize)]
    struct Doc {
        #[serde(serialize_with = "finite::f64")]
        x: f64,
        #[serde(serialize_with = "finite::vec")]
        v: Vec<f64>,
        #[serde(serialize_with = "finite::opt")]
        o: Option<f64>,
    }

    #[test]
    fn non_finite_is_an_encoding_error() {
        let ok = Doc {
            x: 1.5,
            v: vec![0.25],
            o: None,
        };
        let bytes = canonical_encode(&ok).unwrap();
        let again: Doc = decode(&bytes).unwrap();
        assert_eq!(canonical_encode(&again).unwrap(), bytes);
        for bad in [
            Doc { x: f64::NAN, v: vec![], o: None },
            Doc { x: 0.0, v: vec![f64::INFINITY], o: None },
            Doc { x: 0.0, v: vec![], o: Some(f64::NEG_INFINITY) },
        ] {
            assert!(matches!(canonical_encode(&bad), Err(Error::Encoding(_))));
        }
    }
}
