//! Brace-delimited key-value lines shared by vocabulary files and prompts.
//!
//! ```text
//! {'shape':2,'colour':'orange','amount':2,'word':'sanu'}
//! {'shape':1,'colour':'green','amount':2,'word':'sutupepi','communicativeSuccess':0}
//! {'word':'wipisu','shape':3,'colour':'blue','amount':1,'communicativeSuccess':1}
//! ```
//!
//! Files use the shape-first order only, one entry per line, each line
//! terminated by `\n`. Either every line carries `communicativeSuccess` or
//! none does, so `render(parse(text)) == text` for any file this module wrote.

use crate::domain::{Colour, Signal, Stimulus, Vocabulary, VocabularyEntry};
use crate::error::FormatError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineStyle {
    /// shape, colour, amount, word
    Attributes,
    /// shape, colour, amount, word, communicativeSuccess
    AttributesWithSuccess,
    /// word, shape, colour, amount, communicativeSuccess
    WordFirst,
}

pub fn render_attributes(stimulus: &Stimulus) -> String {
    format!(
        "'shape':{},'colour':'{}','amount':{}",
        stimulus.shape(),
        stimulus.colour(),
        stimulus.amount()
    )
}

pub fn render_entry(entry: &VocabularyEntry, style: LineStyle) -> String {
    let attrs = render_attributes(&entry.stimulus);
    let flag = u8::from(entry.communicative_success);
    match style {
        LineStyle::Attributes => format!("{{{attrs},'word':'{}'}}", entry.signal),
        LineStyle::AttributesWithSuccess => {
            format!("{{{attrs},'word':'{}','communicativeSuccess':{flag}}}", entry.signal)
        }
        LineStyle::WordFirst => {
            format!("{{'word':'{}',{attrs},'communicativeSuccess':{flag}}}", entry.signal)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Int(i64),
    Str(String),
}

fn parse_pairs(line: &str, lineno: usize) -> Result<Vec<(String, Value)>, FormatError> {
    let err = |msg: String| FormatError::new(lineno, msg);
    let body = line
        .strip_prefix('{')
        .and_then(|l| l.strip_suffix('}'))
        .ok_or_else(|| err("expected a line of the form {...}".into()))?;
    let bytes = body.as_bytes();
    let mut pos = 0;
    let mut out = Vec::new();

    let quoted = |pos: &mut usize| -> Result<String, FormatError> {
        if bytes.get(*pos) != Some(&b'\'') {
            return Err(err(format!("expected ' at column {}", *pos + 2)));
        }
        let start = *pos + 1;
        let end = body[start..]
            .find('\'')
            .map(|i| start + i)
            .ok_or_else(|| err("unterminated quoted string".into()))?;
        *pos = end + 1;
        Ok(body[start..end].to_string())
    };

    while pos < bytes.len() {
        let key = quoted(&mut pos)?;
        if bytes.get(pos) != Some(&b':') {
            return Err(err(format!("expected ':' after key '{key}'")));
        }
        pos += 1;
        let value = if bytes.get(pos) == Some(&b'\'') {
            Value::Str(quoted(&mut pos)?)
        } else {
            let start = pos;
            while pos < bytes.len() && (bytes[pos].is_ascii_digit() || bytes[pos] == b'-') {
                pos += 1;
            }
            let digits = &body[start..pos];
            Value::Int(
                digits
                    .parse()
                    .map_err(|_| err(format!("expected a value for key '{key}'")))?,
            )
        };
        out.push((key, value));
        match bytes.get(pos) {
            None => break,
            Some(b',') => {
                pos += 1;
                if pos == bytes.len() {
                    return Err(err("trailing comma".into()));
                }
            }
            Some(_) => return Err(err(format!("unexpected character at column {}", pos + 2))),
        }
    }
    Ok(out)
}

/// Parses one line in any of the three styles.
pub fn parse_entry(line: &str, lineno: usize) -> Result<(VocabularyEntry, LineStyle), FormatError> {
    let err = |msg: String| FormatError::new(lineno, msg);
    let pairs = parse_pairs(line, lineno)?;
    let keys: Vec<&str> = pairs.iter().map(|(k, _)| k.as_str()).collect();
    let style = match keys.as_slice() {
        ["shape", "colour", "amount", "word"] => LineStyle::Attributes,
        ["shape", "colour", "amount", "word", "communicativeSuccess"] => {
            LineStyle::AttributesWithSuccess
        }
        ["word", "shape", "colour", "amount", "communicativeSuccess"] => LineStyle::WordFirst,
        other => return Err(err(format!("unexpected key order {other:?}"))),
    };
    let get = |name: &str| &pairs.iter().find(|(k, _)| k == name).expect("key checked").1;
    let int = |name: &str| match get(name) {
        Value::Int(v) => Ok(*v),
        Value::Str(_) => Err(err(format!("'{name}' must be an integer"))),
    };
    let string = |name: &str| match get(name) {
        Value::Str(v) => Ok(v.clone()),
        Value::Int(_) => Err(err(format!("'{name}' must be a quoted string"))),
    };
    let attr = |v: i64| u8::try_from(v).map_err(|_| err(format!("attribute value {v} out of range")));
    let colour: Colour = string("colour")?.parse().map_err(|e| err(format!("{e}")))?;
    let stimulus = Stimulus::new(attr(int("shape")?)?, colour, attr(int("amount")?)?)
        .map_err(|e| err(e.to_string()))?;
    let signal = Signal::new(string("word")?).map_err(|e| err(e.to_string()))?;
    let communicative_success = match style {
        LineStyle::Attributes => false,
        _ => match int("communicativeSuccess")? {
            0 => false,
            1 => true,
            v => return Err(err(format!("communicativeSuccess must be 0 or 1, got {v}"))),
        },
    };
    Ok((VocabularyEntry { stimulus, signal, communicative_success }, style))
}

/// A parsed vocabulary file.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyDocument {
    pub vocabulary: Vocabulary,
    pub with_success: bool,
}

impl VocabularyDocument {
    pub fn render(&self) -> String {
        render_vocabulary(&self.vocabulary, self.with_success)
    }
}

pub fn render_vocabulary(vocab: &Vocabulary, with_success: bool) -> String {
    let style = if with_success {
        LineStyle::AttributesWithSuccess
    } else {
        LineStyle::Attributes
    };
    let mut out = String::new();
    for entry in vocab.entries() {
        out.push_str(&render_entry(entry, style));
        out.push('\n');
    }
    out
}

pub fn parse_vocabulary(text: &str) -> Result<VocabularyDocument, FormatError> {
    let mut entries = Vec::new();
    let mut with_success = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let (entry, style) = parse_entry(line, lineno)?;
        let has_flag = match style {
            LineStyle::Attributes => false,
            LineStyle::AttributesWithSuccess => true,
            LineStyle::WordFirst => {
                return Err(FormatError::new(lineno, "vocabulary files list 'shape' first"))
            }
        };
        match with_success {
            None => with_success = Some(has_flag),
            Some(prev) if prev != has_flag => {
                return Err(FormatError::new(
                    lineno,
                    "communicativeSuccess must be present on every line or on none",
                ))
            }
            _ => {}
        }
        if entries.iter().any(|e: &VocabularyEntry| e.stimulus == entry.stimulus) {
            return Err(FormatError::new(lineno, format!("duplicate stimulus {}", entry.stimulus)));
        }
        entries.push(entry);
    }
    let vocabulary = Vocabulary::new(entries).map_err(|e| FormatError::new(0, e.to_string()))?;
    Ok(VocabularyDocument { vocabulary, with_success: with_success.unwrap_or(false) })
}
