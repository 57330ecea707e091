use serde::Deserialize;

use crate::error::{FluteError, Result};

pub const BUILTIN: &str = include_str!("presets.toml");

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ShapePreset {
    pub name: String,
    pub m_min: usize,
    pub m_max: usize,
    pub shapes: Vec<Shape>,
}

#[derive(Debug, Deserialize)]
struct PresetFile {
    preset: Vec<ShapePreset>,
}

pub fn parse_presets(text: &str) -> Result<Vec<ShapePreset>> {
    let file: PresetFile =
        toml::from_str(text).map_err(|e| FluteError::Input(format!("preset file: {e}")))?;
    for p in &file.preset {
        if p.m_min == 0 || p.m_max < p.m_min || p.shapes.iter().any(|s| s.n == 0 || s.k == 0) {
            return Err(FluteError::Input(format!(
                "preset {} has a zero or inverted dimension",
                p.name
            )));
        }
    }
    Ok(file.preset)
}

pub fn builtin_presets() -> Vec<ShapePreset> {
    parse_presets(BUILTIN).expect("built-in presets parse")
}

pub fn find<'a>(presets: &'a [ShapePreset], name: &str) -> Result<&'a ShapePreset> {
    presets.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = presets.iter().map(|p| p.name.as_str()).collect();
        FluteError::Config(format!(
            "unknown preset {name:?} (have: {})",
            names.join(", ")
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_shapes() {
        let presets = builtin_presets();
        let p = find(&presets, "llama3-8b").unwrap();
        assert!(p.shapes.iter().all(|s| s.k == 4096));
        let ns: Vec<usize> = p.shapes.iter().map(|s| s.n).collect();
        assert_eq!(ns, vec![6144, 4096, 28672, 14336]);
        assert!(find(&presets, "llama3-70b")
            .unwrap()
            .shapes
            .iter()
            .all(|s| s.k == 8192));
        assert!(find(&presets, "gpt2").is_err());
    }

    #[test]
    fn rejects_zero_dims() {
        let text = "[[preset]]\nname = \"x\"\nm_min = 0\nm_max = 1\nshapes = []\n";
        assert!(parse_presets(text).is_err());
    }
}
