use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const SEG: usize = 4;

/// 5 specials + 95 printable ASCII characters + newline.
pub const VOCAB_SIZE: usize = 101;

const SPECIALS: [&str; 5] = ["<PAD>", "<BOS>", "<EOS>", "<Image>", "<SEG>"];
const FIRST_CHAR_ID: usize = 5;
const NEWLINE_ID: usize = 100;

/// Fixed character-level vocabulary.
///
/// Ids 0..=4 are `<PAD>`, `<BOS>`, `<EOS>`, `<IMG>`, `<SEG>`; the image
/// placeholder is spelled `<Image>` in text. Printable ASCII
/// `0x20..=0x7E` maps to `5..=99` in byte order; `'\n'` is 100.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn len(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn char_id(&self, ch: char) -> Option<usize> {
        match ch {
            '\n' => Some(NEWLINE_ID),
            ' '..='~' => Some(FIRST_CHAR_ID + (ch as usize - 0x20)),
            _ => None,
        }
    }

    /// Literal spelling of an id.
    pub fn spelling(&self, id: usize) -> Result<String> {
        match id {
            0..=4 => Ok(SPECIALS[id].to_string()),
            NEWLINE_ID => Ok("\n".to_string()),
            FIRST_CHAR_ID..NEWLINE_ID => Ok(((id - FIRST_CHAR_ID + 0x20) as u8 as char).to_string()),
            _ => Err(Error::IdOutOfRange(id)),
        }
    }
}

/// Token ids with per-position supervision flags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// True only on answer positions that the text loss should predict.
    pub supervise: Vec<bool>,
    /// Index of the first `<SEG>` in `ids`.
    pub seg_position: Option<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let supervise = vec![false; ids.len()];
        let seg_position = ids.iter().position(|&t| t == SEG);
        Self { ids, supervise, seg_position }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `other`, marking its positions with `supervise`.
    pub fn extend(&mut self, other: &TokenSequence, supervise: bool) {
        self.ids.extend_from_slice(&other.ids);
        self.supervise.extend(std::iter::repeat_n(supervise, other.len()));
        self.seg_position = self.ids.iter().position(|&t| t == SEG);
    }

    pub fn push(&mut self, id: usize, supervise: bool) {
        self.ids.push(id);
        self.supervise.push(supervise);
        if self.seg_position.is_none() && id == SEG {
            self.seg_position = Some(self.ids.len() - 1);
        }
    }

    pub fn supervised_count(&self) -> usize {
        self.supervise.iter().filter(|&&s| s).count()
    }

    pub fn count(&self, id: usize) -> usize {
        self.ids.iter().filter(|&&t| t == id).count()
    }
}

/// Splits `text` into character tokens, recognising the special spellings.
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    let vocab = Vocabulary;
    let mut ids = Vec::with_capacity(text.len());
    let mut offset = 0;
    while offset < text.len() {
        let rest = &text[offset..];
        if let Some(id) = SPECIALS.iter().position(|s| rest.starts_with(s)) {
            ids.push(id);
            offset += SPECIALS[id].len();
            continue;
        }
        let ch = rest.chars().next().expect("non-empty remainder");
        let id = vocab.char_id(ch).ok_or(Error::UnsupportedCharacter { ch, offset })?;
        ids.push(id);
        offset += ch.len_utf8();
    }
    Ok(TokenSequence::new(ids))
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let vocab = Vocabulary;
    ids.iter().map(|&id| vocab.spelling(id)).collect()
}
