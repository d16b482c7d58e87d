//! Writes a TREC-format stand-in corpus and matching word vectors.
//!
//! ```text
//! cargo run -p dolfin-core --example toy_corpus -- OUT_DIR [TRAIN] [TEST] [DIM]
//! ```

use std::path::PathBuf;

use dolfin::data::load_trec;
use dolfin::synthetic::{write_embeddings, write_trec};

fn main() -> dolfin::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy-data".into()));
    let mut num = |default: usize| args.next().and_then(|s| s.parse().ok()).unwrap_or(default);
    let (train, test, dim) = (num(1000), num(500), num(50));
    write_trec(&out, train, test, 7)?;
    let vocab = load_trec(&out.join("trec"))?.build_vocab();
    write_embeddings(&out.join("vectors.txt"), &vocab, dim, 0, 7)?;
    println!("wrote {} (vocabulary {})", out.display(), vocab.len());
    Ok(())
}
