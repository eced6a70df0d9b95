#![no_main]

use libfuzzer_sys::fuzz_target;
use metast::seqlab::{bio_decode, bio_encode, LabelScheme};

fuzz_target!(|data: &[u8]| {
    let Some((&head, raw)) = data.split_first() else {
        return;
    };
    let n_slots = (head % 4) as usize + 1;
    let scheme =
        LabelScheme::new((0..n_slots).map(|i| format!("s{i}")).collect::<Vec<_>>()).unwrap();
    // raw bytes land both in and out of the tag range: the decoder must
    // reject out-of-range ids and never panic
    let tags: Vec<usize> = raw.iter().map(|&b| b as usize % (scheme.n_tags() + 2)).collect();
    let Ok(spans) = bio_decode(&tags, &scheme) else {
        assert!(tags.iter().any(|&t| t >= scheme.n_tags()));
        return;
    };
    for w in spans.windows(2) {
        assert!(w[0].end < w[1].start);
    }
    for s in &spans {
        assert!(s.start <= s.end && s.end < tags.len());
    }
    // canonical re-encode must decode back to the same spans
    let encoded = bio_encode(&spans, tags.len(), &scheme).unwrap();
    assert_eq!(bio_decode(&encoded, &scheme).unwrap(), spans);
});
