//! Client request parsing and response encoding for the JSON-lines protocol.

use proofkernel_core::document::SpanId;
use serde::Deserialize;
use serde_json::{Map, Value, json};

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum Command {
    Open { text: String },
    Edit { base_version: u64, from: usize, to: usize, insert: String },
    Observe { span: SpanId },
    Unobserve,
    Status,
    Metrics,
    Quit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub command: Command,
}

/// A request that could not be understood. `id` is set whenever the line
/// carried a usable one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BadRequest {
    pub id: Option<u64>,
    pub error: String,
}

pub fn parse_request(line: &str) -> Result<Request, BadRequest> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| BadRequest { id: None, error: format!("malformed JSON: {e}") })?;
    parse_request_value(value)
}

pub fn parse_request_value(value: Value) -> Result<Request, BadRequest> {
    let Value::Object(obj) = value else {
        return Err(BadRequest { id: None, error: "request must be a JSON object".into() });
    };
    let id = match obj.get("id") {
        Some(v) => v.as_u64().ok_or_else(|| BadRequest { id: None, error: "id must be a natural number".into() })?,
        None => return Err(BadRequest { id: None, error: "missing id".into() }),
    };
    let command = Command::deserialize(Value::Object(obj))
        .map_err(|e| BadRequest { id: Some(id), error: format!("bad request: {e}") })?;
    Ok(Request { id, command })
}

pub fn ok_response(id: u64, fields: Map<String, Value>) -> String {
    let mut obj = Map::new();
    obj.insert("ref".into(), json!(id));
    obj.insert("ok".into(), json!(true));
    for (k, v) in fields {
        if k != "ref" && k != "ok" {
            obj.insert(k, v);
        }
    }
    Value::Object(obj).to_string()
}

pub fn error_response(id: Option<u64>, error: &str, detail: Option<&str>) -> String {
    let mut v = json!({"ref": id, "ok": false, "error": error});
    if let Some(d) = detail {
        v["detail"] = json!(d);
    }
    v.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        let cases = [
            (r#"{"id":1,"cmd":"open","text":"def a = 1 ."}"#, Command::Open { text: "def a = 1 .".into() }),
            (
                r#"{"id":2,"cmd":"edit","base_version":1,"from":0,"to":3,"insert":"x"}"#,
                Command::Edit { base_version: 1, from: 0, to: 3, insert: "x".into() },
            ),
            (r#"{"id":3,"cmd":"observe","span":7}"#, Command::Observe { span: SpanId(7) }),
            (r#"{"id":4,"cmd":"unobserve"}"#, Command::Unobserve),
            (r#"{"id":5,"cmd":"status"}"#, Command::Status),
            (r#"{"id":6,"cmd":"metrics","extra":true}"#, Command::Metrics),
            (r#"{"cmd":"quit","id":7}"#, Command::Quit),
        ];
        for (line, command) in cases {
            assert_eq!(parse_request(line).unwrap().command, command, "{line}");
        }
    }

    #[test]
    fn malformed_lines() {
        assert_eq!(parse_request("{nope").unwrap_err().id, None);
        assert_eq!(parse_request("[1]").unwrap_err().id, None);
        assert_eq!(parse_request(r#"{"cmd":"status"}"#).unwrap_err().error, "missing id");
        assert_eq!(parse_request(r#"{"id":-1,"cmd":"status"}"#).unwrap_err().id, None);
        assert_eq!(parse_request(r#"{"id":4,"cmd":"frob"}"#).unwrap_err().id, Some(4));
        assert_eq!(parse_request(r#"{"id":4,"cmd":"edit","from":1}"#).unwrap_err().id, Some(4));
        assert_eq!(parse_request(r#"{"id":4}"#).unwrap_err().id, Some(4));
    }

    #[test]
    fn response_shapes() {
        let mut m = Map::new();
        m.insert("version".into(), json!(3));
        let v: Value = serde_json::from_str(&ok_response(9, m)).unwrap();
        assert_eq!(v, json!({"ref": 9, "ok": true, "version": 3}));
        let v: Value = serde_json::from_str(&error_response(None, "malformed JSON", None)).unwrap();
        assert_eq!(v, json!({"ref": null, "ok": false, "error": "malformed JSON"}));
    }
}
