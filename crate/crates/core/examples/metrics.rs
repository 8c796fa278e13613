//! Word-overlap, embedding and diversity metrics on a few hand-made
//! responses, with single- and multi-reference aggregation.

use smrt::data::{tokenize, Vocabulary};
use smrt::eval::{
    distinct_n, embedding_metric, evaluate, greedy_matching, rouge_l, sentence_bleu, EmbeddingMode, EmbeddingTable,
    RefMode,
};

fn main() -> anyhow::Result<()> {
    let hyp = tokenize("the cat");
    let reference = tokenize("the cat sat");
    let bleu = sentence_bleu(&hyp, std::slice::from_ref(&reference), 4);
    println!("`the cat` vs `the cat sat`");
    println!(
        "  sentence BLEU-1..4 {:.2} {:.2} {:.2} {:.2}",
        bleu[0], bleu[1], bleu[2], bleu[3]
    );
    println!("  ROUGE-L {:.2}", rouge_l(&hyp, &reference));

    let hyps: Vec<Vec<String>> = [
        "yes i love pizza",
        "sure i adore pasta",
        "yes i love pizza",
        "okay it is fine",
    ]
    .iter()
    .map(|s| tokenize(s))
    .collect();
    let refs: Vec<Vec<Vec<String>>> = [
        vec!["yeah i love pizza", "yes i love pizza"],
        vec!["yes i love pasta", "sure i adore pasta"],
        vec!["no i hate pizza"],
        vec!["yes it is fine", "okay it is fine", "sure it is alright"],
    ]
    .iter()
    .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
    .collect();

    let vocab = Vocabulary::build(hyps.iter().chain(refs.iter().flatten()).map(Vec::as_slice));
    let emb = EmbeddingTable::random(&vocab, 32, 1);
    println!(
        "\nembedding metrics for `{}` vs `{}`: average {:.2}, extrema {:.2}, greedy {:.2}",
        hyps[0].join(" "),
        refs[0][0].join(" "),
        embedding_metric(&hyps[0], &refs[0][0], &emb, EmbeddingMode::Average),
        embedding_metric(&hyps[0], &refs[0][0], &emb, EmbeddingMode::Extrema),
        greedy_matching(&hyps[0], &refs[0][0], &emb)
    );
    println!(
        "distinct-1/2/3 of the responses: {:.2} {:.2} {:.2}\n",
        distinct_n(&hyps, 1),
        distinct_n(&hyps, 2),
        distinct_n(&hyps, 3)
    );

    for mode in [RefMode::Single, RefMode::Multi] {
        print!("{}", evaluate(&hyps, &refs, &emb, mode)?.to_table());
        println!();
    }
    Ok(())
}
