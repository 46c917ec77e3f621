//! Ranks candidate lines with a bag-of-words classifier and keeps the best k.

use lyricjam::ranker::{self, ClassifierConfig, ClassifierRanker, TopSampling};

const LABELED: &str = "1\tthe river carries my name\n\
1\tcold tide under a blue moon\n\
1\tember light on the highway\n\
0\tthe the the the\n\
0\tname name my my\n\
0\tunder under a a a\n";

fn main() -> lyricjam::Result<()> {
    let data = ranker::parse_labeled_lines(LABELED)?;
    let clf = ClassifierRanker::train(&data, ClassifierConfig::default())?;
    println!("training accuracy {:.2}", clf.accuracy(&data));

    let candidates: Vec<String> = [
        "blue tide carries the moon",
        "the the the",
        "blue tide carries the moon",
        "ember on the river",
        "a a under",
    ]
    .map(String::from)
    .to_vec();
    let scores: Vec<f64> = candidates.iter().map(|c| clf.logit(c)).collect();
    for line in ranker::top_k(&candidates, &scores, 2)? {
        println!("#{} {:+.3}  {}", line.rank, line.score, line.text);
    }
    let sampled = ranker::select(&candidates, &scores, 2, Some(TopSampling { m: 3, seed: 5 }))?;
    println!("two of the top three: {:?}", sampled.iter().map(|l| &l.text).collect::<Vec<_>>());
    Ok(())
}
