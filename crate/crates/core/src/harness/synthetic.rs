//! Seeded toy corpora.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{tokenize, Dialogue};
use crate::error::{Error, Result};

const PLACES: [&str; 10] = [
    "park", "museum", "beach", "market", "library", "cinema", "station", "garden", "harbor", "stadium",
];
const THINGS: [&str; 10] = [
    "music", "food", "weather", "crowd", "view", "coffee", "show", "tour", "game", "exhibit",
];
const FEELINGS: [&str; 6] = ["great", "boring", "noisy", "lovely", "strange", "crowded"];

const OPENERS: [&str; 4] = [
    "i went to the {p} yesterday .",
    "we spent the afternoon at the {p} .",
    "my sister took me to the {p} .",
    "there was an event at the {p} .",
];
const FOLLOW_UPS: [&str; 3] = [
    "what did you think of the {t} ?",
    "how was the {t} there ?",
    "did you like the {t} ?",
];
const REPLIES: [&str; 10] = [
    "the {t} was {f} , i loved it .",
    "honestly the {t} was {f} .",
    "it was {f} , but i want to go back .",
    "i would rather stay home next time .",
    "the {p} is always {f} on weekends .",
    "we should go to the {p} together .",
    "not bad , the {t} was {f} enough .",
    "i took many photos of the {t} .",
    "it reminded me of the old {p} .",
    "i did not notice the {t} at all .",
];

fn fill(template: &str, p: &str, t: &str, f: &str) -> String {
    template.replace("{p}", p).replace("{t}", t).replace("{f}", f)
}

/// `contexts` two-turn contexts, each paired with `alternatives` different
/// responses.
///
/// Contexts share opener and follow-up phrasing and differ in their place and
/// topic words; responses are drawn from one template pool, so a response
/// pattern recurs under many contexts.
pub fn one_to_many_corpus(contexts: usize, alternatives: usize, seed: u64) -> Result<Vec<Dialogue>> {
    if contexts > PLACES.len() * THINGS.len() {
        return Err(Error::Invalid(format!(
            "at most {} distinct contexts, asked for {contexts}",
            PLACES.len() * THINGS.len()
        )));
    }
    if alternatives == 0 || alternatives > REPLIES.len() {
        return Err(Error::Invalid(format!(
            "alternatives must be in 1..={}, got {alternatives}",
            REPLIES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize)> = (0..PLACES.len()).flat_map(|p| (0..THINGS.len()).map(move |t| (p, t))).collect();
    pairs.shuffle(&mut rng);
    let mut out = Vec::with_capacity(contexts * alternatives);
    for &(p, t) in &pairs[..contexts] {
        let (p, t) = (PLACES[p], THINGS[t]);
        let opener = fill(OPENERS[rng.random_range(0..OPENERS.len())], p, t, "");
        let follow = fill(FOLLOW_UPS[rng.random_range(0..FOLLOW_UPS.len())], p, t, "");
        let mut replies: Vec<usize> = (0..REPLIES.len()).collect();
        replies.shuffle(&mut rng);
        for &r in &replies[..alternatives] {
            let f = FEELINGS[rng.random_range(0..FEELINGS.len())];
            out.push(Dialogue {
                context: vec![tokenize(&opener), tokenize(&follow)],
                response: tokenize(&fill(REPLIES[r], p, t, f)),
            });
        }
    }
    Ok(out)
}
