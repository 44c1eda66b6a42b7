use super::CorpusError;

/// Split a UTF-8 document stream into paragraph units at blank lines.
///
/// Lines inside a paragraph are joined with a single space. Paragraphs are never
/// concatenated with their neighbours.
pub fn ingest(raw: &[u8]) -> Result<Vec<String>, CorpusError> {
    let text = std::str::from_utf8(raw).map_err(|e| CorpusError::Encoding {
        offset: e.valid_up_to(),
    })?;
    Ok(split_paragraphs(text))
}

pub fn split_paragraphs(text: &str) -> Vec<String> {
    let mut units = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                units.push(current.join(" "));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        units.push(current.join(" "));
    }
    units
}

/// Lowercased word tokens. Alphanumeric runs form one token; any other
/// non-whitespace character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}
