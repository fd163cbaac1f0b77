use std::collections::HashSet;
use std::ops::Range;

use ndarray::ArrayView2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Wire sentinel for an unknown concept label.
pub const UNKNOWN_CONCEPT: u32 = u32::MAX;

/// One image-text pair as pre-extracted feature vectors plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub image: Vec<f32>,
    pub text: Vec<f32>,
    /// Concept the image was drawn from.
    pub concept: Option<u32>,
    /// Whether the text was drawn from the same concept as the image.
    pub aligned: Option<bool>,
}

/// Borrowed view of a record stored inside a [`Pool`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordRef<'a> {
    pub id: u64,
    pub image: &'a [f32],
    pub text: &'a [f32],
    pub concept: Option<u32>,
    pub aligned: Option<bool>,
}

impl RecordRef<'_> {
    pub fn to_owned(&self) -> Record {
        Record {
            id: self.id,
            image: self.image.to_vec(),
            text: self.text.to_vec(),
            concept: self.concept,
            aligned: self.aligned,
        }
    }
}

impl Record {
    pub fn as_ref(&self) -> RecordRef<'_> {
        RecordRef {
            id: self.id,
            image: &self.image,
            text: &self.text,
            concept: self.concept,
            aligned: self.aligned,
        }
    }
}

/// An ordered in-memory collection of records with fixed feature dimensions.
///
/// Features are stored row-major in two flat buffers so that whole pools can
/// be viewed as matrices without copying.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pool {
    d_img: usize,
    d_txt: usize,
    ids: Vec<u64>,
    image: Vec<f32>,
    text: Vec<f32>,
    concepts: Vec<Option<u32>>,
    aligned: Vec<Option<bool>>,
}

impl Pool {
    pub fn new(d_img: usize, d_txt: usize) -> Self {
        Self {
            d_img,
            d_txt,
            ..Default::default()
        }
    }

    pub fn with_capacity(d_img: usize, d_txt: usize, n: usize) -> Self {
        Self {
            d_img,
            d_txt,
            ids: Vec::with_capacity(n),
            image: Vec::with_capacity(n * d_img),
            text: Vec::with_capacity(n * d_txt),
            concepts: Vec::with_capacity(n),
            aligned: Vec::with_capacity(n),
        }
    }

    pub fn from_records(d_img: usize, d_txt: usize, records: &[Record]) -> Result<Self> {
        let mut pool = Self::with_capacity(d_img, d_txt, records.len());
        for r in records {
            pool.push(r.as_ref())?;
        }
        Ok(pool)
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn d_txt(&self) -> usize {
        self.d_txt
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn concepts(&self) -> &[Option<u32>] {
        &self.concepts
    }

    pub fn aligned(&self) -> &[Option<bool>] {
        &self.aligned
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.image[i * self.d_img..(i + 1) * self.d_img]
    }

    pub fn text(&self, i: usize) -> &[f32] {
        &self.text[i * self.d_txt..(i + 1) * self.d_txt]
    }

    pub fn image_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.d_img), &self.image).expect("pool layout")
    }

    pub fn text_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.d_txt), &self.text).expect("pool layout")
    }

    pub fn record(&self, i: usize) -> RecordRef<'_> {
        RecordRef {
            id: self.ids[i],
            image: self.image(i),
            text: self.text(i),
            concept: self.concepts[i],
            aligned: self.aligned[i],
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = RecordRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.record(i))
    }

    /// Appends a record, checking dimensions and finiteness.
    pub fn push(&mut self, r: RecordRef<'_>) -> Result<()> {
        if r.image.len() != self.d_img || r.text.len() != self.d_txt {
            return Err(Error::DimensionMismatch(format!(
                "record {} has {}x{} features, pool expects {}x{}",
                r.id,
                r.image.len(),
                r.text.len(),
                self.d_img,
                self.d_txt
            )));
        }
        if !r.image.iter().chain(r.text).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("record {} features", r.id)));
        }
        self.push_unchecked(r);
        Ok(())
    }

    pub(crate) fn push_unchecked(&mut self, r: RecordRef<'_>) {
        self.ids.push(r.id);
        self.image.extend_from_slice(r.image);
        self.text.extend_from_slice(r.text);
        self.concepts.push(r.concept);
        self.aligned.push(r.aligned);
    }

    /// Mutable access to one record's image features.
    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.image[i * self.d_img..(i + 1) * self.d_img]
    }

    /// Mutable access to one record's text features.
    pub fn text_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.text[i * self.d_txt..(i + 1) * self.d_txt]
    }

    /// Records at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Pool {
        let mut out = Pool::with_capacity(self.d_img, self.d_txt, indices.len());
        for &i in indices {
            out.push_unchecked(self.record(i));
        }
        out
    }

    pub fn slice(&self, range: Range<usize>) -> Pool {
        Pool {
            d_img: self.d_img,
            d_txt: self.d_txt,
            ids: self.ids[range.clone()].to_vec(),
            image: self.image[range.start * self.d_img..range.end * self.d_img].to_vec(),
            text: self.text[range.start * self.d_txt..range.end * self.d_txt].to_vec(),
            concepts: self.concepts[range.clone()].to_vec(),
            aligned: self.aligned[range].to_vec(),
        }
    }

    /// Appends all records of `other`.
    pub fn extend(&mut self, other: &Pool) -> Result<()> {
        if other.d_img != self.d_img || other.d_txt != self.d_txt {
            return Err(Error::DimensionMismatch(format!(
                "cannot append {}x{} pool to {}x{} pool",
                other.d_img, other.d_txt, self.d_img, self.d_txt
            )));
        }
        self.ids.extend_from_slice(&other.ids);
        self.image.extend_from_slice(&other.image);
        self.text.extend_from_slice(&other.text);
        self.concepts.extend_from_slice(&other.concepts);
        self.aligned.extend_from_slice(&other.aligned);
        Ok(())
    }

    pub fn concat<'a>(d_img: usize, d_txt: usize, parts: impl IntoIterator<Item = &'a Pool>) -> Result<Pool> {
        let mut out = Pool::new(d_img, d_txt);
        for p in parts {
            out.extend(p)?;
        }
        Ok(out)
    }

    /// Checks record invariants: finite features and unique ids.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = (0..self.len())
            .find(|&i| !self.image(i).iter().chain(self.text(i)).all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite(format!("record {} features", self.ids[i])));
        }
        let mut seen = HashSet::with_capacity(self.len());
        if let Some(dup) = self.ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::config(format!("duplicate record id {dup}")));
        }
        Ok(())
    }

    /// SHA-256 over ids and feature bits; two pools with equal fingerprints
    /// hold the same records in the same order.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.d_img as u64).to_le_bytes());
        h.update((self.d_txt as u64).to_le_bytes());
        for i in 0..self.len() {
            h.update(self.ids[i].to_le_bytes());
            for v in self.image(i).iter().chain(self.text(i)) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub(crate) fn fingerprint_u64(&self) -> u64 {
        let f = self.fingerprint();
        u64::from_le_bytes(f[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64) -> Record {
        Record {
            id,
            image: vec![id as f32, 1.0],
            text: vec![2.0, 3.0, id as f32],
            concept: Some(id as u32 % 3),
            aligned: Some(id % 2 == 0),
        }
    }

    #[test]
    fn push_checks_dimensions_and_finiteness() {
        let mut p = Pool::new(2, 3);
        p.push(rec(1).as_ref()).unwrap();
        let mut bad = rec(2);
        bad.image.push(0.0);
        assert!(matches!(p.push(bad.as_ref()), Err(Error::DimensionMismatch(_))));
        let mut nan = rec(3);
        nan.text[0] = f32::NAN;
        assert!(matches!(p.push(nan.as_ref()), Err(Error::NonFinite(_))));
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn select_slice_and_views_agree() {
        let recs: Vec<_> = (0..5).map(rec).collect();
        let p = Pool::from_records(2, 3, &recs).unwrap();
        assert_eq!(p.record(3).to_owned(), recs[3]);
        assert_eq!(p.select(&[4, 0]).ids(), &[4, 0]);
        assert_eq!(p.slice(1..3).ids(), &[1, 2]);
        assert_eq!(p.image_matrix().row(2).to_vec(), recs[2].image);
        assert_eq!(p.text_matrix().shape(), &[5, 3]);
    }

    #[test]
    fn validate_rejects_duplicate_ids() {
        let p = Pool::from_records(2, 3, &[rec(1), rec(1)]).unwrap();
        assert!(p.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_content_and_order() {
        let p = Pool::from_records(2, 3, &[rec(1), rec(2)]).unwrap();
        let q = Pool::from_records(2, 3, &[rec(2), rec(1)]).unwrap();
        assert_eq!(p.fingerprint(), p.clone().fingerprint());
        assert_ne!(p.fingerprint(), q.fingerprint());
    }
}
