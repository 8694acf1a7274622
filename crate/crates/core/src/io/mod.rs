//! On-disk formats: QEMB embeddings, QPRS training pairs, id lists and the
//! TSV files exchanged between subcommands.

mod bin;
pub mod embeddings;
pub mod pairs;
pub mod tsv;

pub use bin::{ByteReader, ByteWriter};
pub use embeddings::{
    decode_embeddings, encode_embeddings, read_embeddings, read_ids, write_embeddings, write_ids, EmbeddingHeader,
    HEADER_LEN,
};
pub use pairs::{read_pairs, write_pairs, TrainingPair};
