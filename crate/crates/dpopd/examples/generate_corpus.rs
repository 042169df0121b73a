//! Draw the default control-coded Markov chain, sample all four corpus
//! splits, and show what the artifacts look like on disk.

use dpopd::data::{
    corpus_to_string, generate_chain, sample_corpus, sample_split, Split, SplitSizes, Vocab,
};
use dpopd::rng::RngStream;
use dpopd::trainer::chain_entropy_ppl;

fn main() -> dpopd::Result<()> {
    let seed = 0;
    let vocab = Vocab::new(32, 4)?;
    println!(
        "vocab: {} tokens = PAD/BOS/EOS + {} control codes + {} content",
        vocab.size(),
        vocab.num_codes(),
        vocab.num_content()
    );

    let spec = generate_chain(vocab, 2, 0.5, &mut RngStream::new(seed, "chain"))?;
    println!(
        "chain: order {}, {} transition rows, hash {}",
        spec.order(),
        spec.num_rows(),
        &spec.hash()[..16]
    );

    let sizes = SplitSizes {
        train: 2000,
        valid: 200,
        test: 500,
    };
    let set = sample_corpus(&spec, sizes, 8, 40, &mut RngStream::new(seed, "data"))?;
    let public = sample_split(
        &spec,
        2000,
        8,
        40,
        Split::Public,
        0,
        &mut RngStream::new(seed, "public-data"),
    )?;

    for corpus in [&set.train, &set.valid, &set.test, &public] {
        println!("{:>6}: {} records", corpus.split.to_string(), corpus.len());
    }

    let ex = &set.train.examples[0];
    println!(
        "first train record: id {}, code {:?}, prompt {:?}, continuation {} tokens",
        ex.id,
        ex.code,
        ex.prompt,
        ex.reference.len()
    );

    let text = corpus_to_string(&set.valid)?;
    println!("file format, first two lines:");
    for line in text.lines().take(2) {
        let short = if line.len() > 120 { &line[..120] } else { line };
        println!("  {short}");
    }

    // The floor any student is chasing: exp(mean conditional entropy).
    println!(
        "chain-entropy PPL on valid: {:.4}",
        chain_entropy_ppl(&spec, &set.valid)?
    );
    println!("uniform-model PPL would be: {}", spec.vocab().size());
    Ok(())
}
