//! Shows the oracle teacher's next-token distributions along a reference
//! and the paraphrase paths sampled from it in successive epochs.

use smrt::data::{detokenize, tokenize, Vocabulary, BUILTIN_GRAMMAR, EOS};
use smrt::teacher::{oracle_step_dist, sample_path, OracleTeacher, ParaphraseGrammar};

fn main() -> anyhow::Result<()> {
    let grammar = ParaphraseGrammar::parse(BUILTIN_GRAMMAR)?;
    let y = tokenize("yes i really love pizza");
    let mut words = y.clone();
    words.extend(grammar.tokens());
    let vocab = Vocabulary::build(words.iter().map(std::slice::from_ref));
    let ids = vocab.encode(&y);

    println!("paraphrase set of `{}`:", detokenize(&y));
    for p in grammar.paraphrases(&y) {
        println!("  {}", detokenize(&p));
    }

    println!("\nteacher distribution at each reference prefix:");
    for i in 0..=ids.len() {
        let d = oracle_step_dist(&grammar, &vocab, &ids, &ids[..i])?;
        let options: Vec<String> = d
            .support
            .iter()
            .map(|&t| {
                let w = if t == EOS { "</s>" } else { vocab.token(t) };
                format!("{w} {:.3}", d.probs[t])
            })
            .collect();
        println!("  {:<28} -> {}", detokenize(&y[..i]), options.join(", "));
    }

    let teacher = OracleTeacher::new(grammar, vocab.clone());
    println!("\nsampled paths (seed 1):");
    for epoch in 1..=6 {
        let path = sample_path(&teacher, &ids, 50, 1, epoch, 64)?;
        let body = &path.tokens[..path.tokens.len() - 1];
        println!(
            "  epoch {epoch}: {:<28} mean entropy {:.3}",
            detokenize(&vocab.decode(body)),
            path.mean_entropy()
        );
    }
    Ok(())
}
