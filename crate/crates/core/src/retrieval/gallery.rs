use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use memmap2::Mmap;

use crate::error::{Error, Result};
use crate::io::{read_embeddings, read_ids, EmbeddingHeader, HEADER_LEN};
use crate::tensor::{Scalar, Tensor2};

enum Storage<T> {
    Owned(Vec<T>),
    /// Whole `QEMB` file; rows start at `HEADER_LEN`.
    Mapped(Mmap),
}

/// Immutable gallery of `N × E` embeddings with one unique id per row.
pub struct GalleryIndex<T: Scalar = f32> {
    n: usize,
    e: usize,
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
    storage: Storage<T>,
}

impl<T: Scalar> std::fmt::Debug for GalleryIndex<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GalleryIndex")
            .field("n", &self.n)
            .field("e", &self.e)
            .field("mapped", &self.is_mapped())
            .finish()
    }
}

fn index_ids(ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut lookup = HashMap::with_capacity(ids.len());
    let mut dups = Vec::new();
    for (row, id) in ids.iter().enumerate() {
        if lookup.insert(id.clone(), row).is_some() {
            dups.push(id.clone());
        }
    }
    if dups.is_empty() {
        Ok(lookup)
    } else {
        dups.sort();
        dups.dedup();
        Err(Error::Config(format!("duplicate gallery ids: {}", dups.join(", "))))
    }
}

fn check_finite<T: Scalar>(data: &[T], e: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(at) => Err(Error::NonFinite(format!("gallery row {} column {}", at / e, at % e))),
    }
}

impl<T: Scalar> GalleryIndex<T> {
    pub fn new(embeddings: Tensor2<T>, ids: Vec<String>) -> Result<Self> {
        let (n, e) = embeddings.shape();
        if ids.len() != n {
            return Err(Error::dim("gallery", format!("{n} rows but {} ids", ids.len())));
        }
        check_finite(embeddings.data(), e.max(1))?;
        let lookup = index_ids(&ids)?;
        Ok(Self {
            n,
            e,
            ids,
            lookup,
            storage: Storage::Owned(embeddings.into_vec()),
        })
    }

    /// Ids are the decimal row numbers.
    pub fn with_row_ids(embeddings: Tensor2<T>) -> Result<Self> {
        let ids = (0..embeddings.rows()).map(|i| i.to_string()).collect();
        Self::new(embeddings, ids)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.e
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self.storage, Storage::Mapped(_))
    }

    /// Row-major `N·E` values.
    pub fn data(&self) -> &[T] {
        match &self.storage {
            Storage::Owned(v) => v,
            Storage::Mapped(m) => bytemuck::cast_slice(&m[HEADER_LEN..]),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data()[i * self.e..(i + 1) * self.e]
    }

    /// An owned copy converted to `U`.
    pub fn cast<U: Scalar>(&self) -> GalleryIndex<U> {
        GalleryIndex {
            n: self.n,
            e: self.e,
            ids: self.ids.clone(),
            lookup: self.lookup.clone(),
            storage: Storage::Owned(self.data().iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }
}

fn ids_for(ids: Option<&Path>, n: usize) -> Result<Vec<String>> {
    let ids = match ids {
        Some(p) => read_ids(p)?,
        None => (0..n).map(|i| i.to_string()).collect(),
    };
    if ids.len() != n {
        return Err(Error::dim("gallery", format!("{n} rows but {} ids", ids.len())));
    }
    Ok(ids)
}

impl GalleryIndex<f32> {
    /// Memory-maps a `QEMB` file. Falls back to reading it into memory when
    /// the mapped payload cannot be viewed as `f32` in place.
    pub fn open(path: &Path, ids: Option<&Path>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        // SAFETY: the mapping is read-only and the file is not modified by
        // this process while the index is alive.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        let header = EmbeddingHeader::parse(&path.display().to_string(), &map)?;
        let (n, e) = (header.count as usize, header.dim as usize);
        let viewable = cfg!(target_endian = "little") && bytemuck::try_cast_slice::<u8, f32>(&map[HEADER_LEN..]).is_ok();
        if !viewable {
            return Self::load(path, ids);
        }
        let ids = ids_for(ids, n)?;
        let lookup = index_ids(&ids)?;
        let index = Self {
            n,
            e,
            ids,
            lookup,
            storage: Storage::Mapped(map),
        };
        check_finite(index.data(), e)?;
        Ok(index)
    }

    /// Reads a `QEMB` file into memory.
    pub fn load(path: &Path, ids: Option<&Path>) -> Result<Self> {
        let m = read_embeddings(path)?;
        let ids = ids_for(ids, m.rows())?;
        Self::new(m, ids)
    }
}
