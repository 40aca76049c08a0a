use super::image::PatchGrid;
use super::text::{TextTokens, PAD, T_CLS, T_SEP};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReprKind {
    ImageOnly,
    TextOnly,
    Pair,
}

/// Tape handles of the embedding tables.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    /// `[V_t, d]` word embeddings, specials included.
    pub text_tokens: Var,
    /// `[max_text_len, d]`, shared by monomodal text and the text half of pairs.
    pub text_pos: Var,
    /// `[P·P·C, d]` patch projection.
    pub patch_proj: Var,
    /// `[1, d]`
    pub image_cls: Var,
    /// `[1, d]` replaces masked patches.
    pub image_mask: Var,
    /// `[1 + N_max, d]`
    pub image_pos: Var,
}

/// Embedded input sequence: `[L, d]` rows plus per-row modality and validity.
///
/// Pairs put the text block first: rows `text_offset..text_offset+text_len`
/// hold `[T_CLS] w_1..w_M [T_SEP]`, rows `image_offset..image_offset+image_len`
/// hold `[I_CLS] v_1..v_N`.
#[derive(Clone, Debug)]
pub struct InputRepr {
    pub embeddings: Var,
    pub tags: Vec<Modality>,
    pub valid: Vec<bool>,
    pub kind: ReprKind,
    /// Full text ids including specials; empty for images.
    pub text_ids: Vec<usize>,
    pub text_offset: usize,
    pub text_len: usize,
    pub image_offset: usize,
    pub image_len: usize,
}

impl InputRepr {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Row holding `[T_CLS]` or, for images, `[I_CLS]`.
    pub fn cls_row(&self) -> usize {
        match self.kind {
            ReprKind::ImageOnly => self.image_offset,
            _ => self.text_offset,
        }
    }

    /// Row of patch `i` (0-based) inside this sequence.
    pub fn patch_row(&self, i: usize) -> usize {
        self.image_offset + 1 + i
    }
}

/// `[E_ICLS; patches · W_patch] + V_pos[0..=N]`.
pub fn build_image_repr<T: Real>(tape: &mut Tape<T>, ev: &EmbeddingVars, g: &PatchGrid) -> Result<InputRepr> {
    let table = tape.shape(ev.image_pos)[0];
    if g.n + 1 > table {
        return Err(Error::Config(format!(
            "{} patches need {} image positions, table has {table}",
            g.n,
            g.n + 1
        )));
    }
    let dim = g.patch_dim();
    if tape.shape(ev.patch_proj)[0] != dim {
        return Err(Error::dim("build_image_repr", &[g.n, dim], tape.shape(ev.patch_proj)));
    }
    let pixels: Vec<T> = g.patches.iter().map(|&p| T::from_f32(p).unwrap()).collect();
    let patches = tape.constant(&[g.n, dim], pixels)?;
    let projected = tape.matmul(patches, ev.patch_proj)?;
    let rows = tape.concat_rows(&[ev.image_cls, projected])?;
    let positions: Vec<usize> = (0..=g.n).collect();
    let pos = tape.gather_rows(ev.image_pos, &positions)?;
    let embeddings = tape.add(rows, pos)?;
    Ok(InputRepr {
        embeddings,
        tags: vec![Modality::Image; g.n + 1],
        valid: vec![true; g.n + 1],
        kind: ReprKind::ImageOnly,
        text_ids: Vec::new(),
        text_offset: 0,
        text_len: 0,
        image_offset: 0,
        image_len: g.n + 1,
    })
}

/// `embed([T_CLS] ++ ids ++ [T_SEP]) + T_pos[0..=M+1]`.
///
/// Texts longer than the position table are truncated; `[T_SEP]` is kept.
pub fn build_text_repr<T: Real>(tape: &mut Tape<T>, ev: &EmbeddingVars, t: &TextTokens) -> Result<InputRepr> {
    let table = tape.shape(ev.text_pos)[0];
    if table < 2 {
        return Err(Error::Config("text position table needs at least 2 rows".into()));
    }
    let keep = t.len().min(table - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(T_CLS);
    ids.extend_from_slice(&t.ids[..keep]);
    ids.push(T_SEP);
    let words = tape.gather_rows(ev.text_tokens, &ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.gather_rows(ev.text_pos, &positions)?;
    let embeddings = tape.add(words, pos)?;
    let len = ids.len();
    Ok(InputRepr {
        embeddings,
        tags: vec![Modality::Text; len],
        valid: vec![true; len],
        kind: ReprKind::TextOnly,
        text_ids: ids,
        text_offset: 0,
        text_len: len,
        image_offset: len,
        image_len: 0,
    })
}

/// `H^vl = [H^w; H^v]`.
pub fn concat_pair<T: Real>(tape: &mut Tape<T>, tw: &InputRepr, tv: &InputRepr) -> Result<InputRepr> {
    if tw.kind != ReprKind::TextOnly || tv.kind != ReprKind::ImageOnly {
        return Err(Error::Contract("concat_pair needs a text and an image representation".into()));
    }
    let (wd, vd) = (tape.shape(tw.embeddings)[1], tape.shape(tv.embeddings)[1]);
    if wd != vd {
        return Err(Error::dim("concat_pair", tape.shape(tw.embeddings), tape.shape(tv.embeddings)));
    }
    let embeddings = tape.concat_rows(&[tw.embeddings, tv.embeddings])?;
    let mut tags = tw.tags.clone();
    tags.extend_from_slice(&tv.tags);
    let mut valid = tw.valid.clone();
    valid.extend_from_slice(&tv.valid);
    Ok(InputRepr {
        embeddings,
        tags,
        valid,
        kind: ReprKind::Pair,
        text_ids: tw.text_ids.clone(),
        text_offset: 0,
        text_len: tw.len(),
        image_offset: tw.len(),
        image_len: tv.len(),
    })
}

/// Appends `extra` invalid `PAD` rows to a text representation.
pub fn pad_text_repr<T: Real>(
    tape: &mut Tape<T>,
    ev: &EmbeddingVars,
    repr: &InputRepr,
    extra: usize,
) -> Result<InputRepr> {
    if repr.kind != ReprKind::TextOnly {
        return Err(Error::Contract("padding applies to text representations".into()));
    }
    if extra == 0 {
        return Ok(repr.clone());
    }
    let pads = tape.gather_rows(ev.text_tokens, &vec![PAD; extra])?;
    let embeddings = tape.concat_rows(&[repr.embeddings, pads])?;
    let mut out = repr.clone();
    out.embeddings = embeddings;
    out.tags.extend(std::iter::repeat_n(Modality::Text, extra));
    out.valid.extend(std::iter::repeat_n(false, extra));
    Ok(out)
}
