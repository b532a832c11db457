//! Versioned prompt templates. The built-in set is compiled in; a directory
//! containing files of the same names overrides individual templates.

use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    /// Recorded in traces, e.g. `rerank/v1`.
    pub id: String,
    pub text: String,
}

impl Template {
    fn builtin(id: &str, text: &str) -> Self {
        Self { id: id.to_string(), text: text.to_string() }
    }

    /// Substitutes `{{name}}` placeholders. Unknown placeholders are left as is.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.text.clone();
        for (name, value) in vars {
            out = out.replace(&format!("{{{{{name}}}}}"), value);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub rerank: Template,
    pub reasoning: Template,
    pub confidence: Template,
    pub revision: Template,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            rerank: Template::builtin("rerank/v1", include_str!("../templates/rerank.v1.txt")),
            reasoning: Template::builtin("reasoning/v1", include_str!("../templates/reasoning.v1.txt")),
            confidence: Template::builtin("confidence/v1", include_str!("../templates/confidence.v1.txt")),
            revision: Template::builtin("revision/v1", include_str!("../templates/revision.v1.txt")),
        }
    }
}

impl Templates {
    /// Built-ins, with any `<name>.<version>.txt` found in `dir` taking
    /// precedence for that name. The template id becomes `<name>/<version>`.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(file) = path.file_name().and_then(|f| f.to_str()) else { continue };
            let Some(stem) = file.strip_suffix(".txt") else { continue };
            let Some((name, version)) = stem.split_once('.') else { continue };
            let slot = match name {
                "rerank" => &mut t.rerank,
                "reasoning" => &mut t.reasoning,
                "confidence" => &mut t.confidence,
                "revision" => &mut t.revision,
                _ => continue,
            };
            *slot = Template { id: format!("{name}/{version}"), text: std::fs::read_to_string(&path)? };
        }
        Ok(t)
    }
}
