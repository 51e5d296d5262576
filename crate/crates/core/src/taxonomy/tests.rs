use proptest::prelude::*;

use super::*;

fn c(s: &str) -> Characteristics {
    s.parse().unwrap()
}

#[test]
fn predicate_examples() {
    use Attack::*;
    assert_eq!(
        feasible_attacks(&c("U,I,S")),
        vec![CacheAttack, FaultlessKaslr, FastEvset]
    );
    assert_eq!(feasible_attacks(&c("U,D")), vec![NoiseFree]);
    assert!(feasible_attacks(&Characteristics::default()).is_empty());
    assert!(feasible_attacks(&c("I,M,D,S")).is_empty());
}

#[test]
fn profile_parsing() {
    assert_eq!(c("1,1,0,0,1"), c("UIS"));
    assert_eq!(c("u i s"), c("U,I,S"));
    assert_eq!(c("0,0,0,0,0"), Characteristics::default());
    assert!("U,X".parse::<Characteristics>().is_err());
    for bits in 0..32 {
        assert_eq!(Characteristics::from_bits(bits).bits(), bits);
    }
}

#[test]
fn embedded_table_verifies() {
    let kb = KnowledgeBase::embedded();
    let rows = verify_table(&kb);
    assert_eq!(rows.len(), 7);
    for r in &rows {
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn overlay_verdicts() {
    let kb = KnowledgeBase::embedded();
    let tsx = kb.get("xbegin/xend").unwrap();
    assert_eq!(tsx.feasibility().cache_attack, Verdict::No);
    assert!(!Attack::FaultlessKaslr.feasible(&tsx.characteristics));
    assert_eq!(
        tsx.feasibility().faultless_kaslr,
        Verdict::NeedsExtraInstructions
    );
    let clflush = kb.get("clflush").unwrap();
    assert_eq!(
        clflush.feasibility().faultless_kaslr,
        Verdict::NeedsExtraInstructions
    );
    let vmask = kb.get("vmaskmovd").unwrap();
    assert_eq!(
        vmask.feasibility().cache_attack,
        Verdict::FeasibleUnproposed
    );
    let demote = kb.get("cldemote").unwrap().feasibility();
    assert_eq!(demote.fast_evset, Verdict::Yes);
    assert_eq!(demote.noise_free, Verdict::No);
}

#[test]
fn tampered_row_fails() {
    let text = include_str!("knowledge_base.toml").replace(
        "faultless_kaslr = \"full\", fast_evset = \"full\"",
        "faultless_kaslr = \"full\", fast_evset = \"empty\"",
    );
    let rows = verify_table(&KnowledgeBase::from_toml(&text).unwrap());
    assert_eq!(rows.iter().filter(|r| !r.pass).count(), 1);
    assert!(KnowledgeBase::from_toml("[[instruction]]\nname = 1").is_err());
}

#[test]
fn marks_round_trip() {
    for s in ["full", "half", "empty", "full+dagger", "half+dagger"] {
        assert_eq!(s.parse::<Mark>().unwrap().to_string(), s);
    }
    assert!("circle".parse::<Mark>().is_err());
}

#[test]
fn monotone_over_all_profiles() {
    assert!(predicates_monotone());
}

proptest! {
    #[test]
    fn kaslr_implies_cache_attack(bits in 0u8..32) {
        let p = Characteristics::from_bits(bits);
        prop_assert!(!Attack::FaultlessKaslr.feasible(&p) || Attack::CacheAttack.feasible(&p));
        prop_assert!(!Attack::FastEvset.feasible(&p) || Attack::CacheAttack.feasible(&p));
    }
}
