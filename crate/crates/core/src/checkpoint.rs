//! Plain-text model checkpoints.
//!
//! ```text
//! DSNT-CHECKPOINT v1
//! spec {"backbone":{...},"head":{...},"rectifier":"softmax"}
//! tensor conv0.weight 16,1,3,3 0.0123 -0.456 ...
//! tensor conv0.bias 16 0 0 ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a reload is
//! bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &str = "DSNT-CHECKPOINT v1";

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

pub fn to_string(model: &Model) -> Result<String> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str("spec ");
    out.push_str(&serde_json::to_string(model.spec())?);
    out.push('\n');
    for (name, t) in model.named_params() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        write!(out, "tensor {} {}", name, dims.join(",")).unwrap();
        for v in t.data() {
            write!(out, " {v:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn from_str(text: &str) -> Result<Model> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(format_err(format!("missing '{MAGIC}' header")));
    }
    let spec_line = lines.next().ok_or_else(|| format_err("missing spec line"))?;
    let spec_json = spec_line
        .strip_prefix("spec ")
        .ok_or_else(|| format_err("second line must start with 'spec '"))?;
    let spec: ModelSpec = serde_json::from_str(spec_json)?;

    let mut named = Vec::new();
    for (lineno, line) in lines.enumerate().map(|(i, l)| (i + 3, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        if fields.next() != Some("tensor") {
            return Err(format_err(format!("line {lineno}: expected 'tensor'")));
        }
        let name = fields
            .next()
            .ok_or_else(|| format_err(format!("line {lineno}: missing name")))?;
        let shape = fields
            .next()
            .ok_or_else(|| format_err(format!("line {lineno}: missing shape")))?
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format_err(format!("line {lineno}: bad shape: {e}")))?;
        let data = fields
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format_err(format!("line {lineno}: bad value: {e}")))?;
        named.push((name.to_string(), Tensor::from_vec(&shape, data)?));
    }
    Model::from_parts(spec, named)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::RectifierKind;
    use crate::model::{BackboneConfig, HeadKind};

    fn model(head: HeadKind) -> Model {
        let spec = ModelSpec {
            backbone: BackboneConfig {
                input_size: 16,
                stage_widths: vec![4, 4],
                downsample_count: 1,
                ..BackboneConfig::default()
            },
            head,
            rectifier: RectifierKind::Softmax,
        };
        Model::new(spec, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for head in [HeadKind::hm(), HeadKind::fc(), HeadKind::dsntr()] {
            let m = model(head);
            let text = to_string(&m).unwrap();
            assert!(text.starts_with(MAGIC));
            assert_eq!(from_str(&text).unwrap(), m);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let text = to_string(&model(HeadKind::dsnt())).unwrap();
        assert!(from_str(&text.replacen(MAGIC, "DSNT-CHECKPOINT v0", 1)).is_err());
        let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(from_str(&truncated).is_err());
        assert!(from_str(&text.replacen("tensor conv0.bias 4 ", "tensor conv0.bias 4 x", 1)).is_err());
    }
}
