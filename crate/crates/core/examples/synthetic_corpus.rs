//! Generates the built-in synthetic dialog corpus and prints its shape:
//! split sizes, vocabulary, and the size of the test paraphrase sets.

use smrt::data::{detokenize, generate_corpus, TemplateSet, BUILTIN_GRAMMAR};
use smrt::runner::corpus_vocab;
use smrt::teacher::ParaphraseGrammar;

fn main() -> anyhow::Result<()> {
    let grammar = ParaphraseGrammar::parse(BUILTIN_GRAMMAR)?;
    let templates = TemplateSet::builtin();
    let corpus = generate_corpus(&grammar, &templates, 2230, 1)?;
    let vocab = corpus_vocab(&templates, &grammar);
    println!(
        "train {}  valid {}  test {}  vocabulary {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        vocab.len()
    );
    let sizes: Vec<usize> = corpus.test.items.iter().map(|it| it.references.len()).collect();
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    println!(
        "references per test prompt: mean {mean:.2}, min {}, max {}",
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap()
    );
    let item = &corpus.test.items[0];
    println!("\nprompt: {}", detokenize(&item.prompt));
    for r in &item.references {
        println!("  ref: {}", detokenize(r));
    }
    Ok(())
}
