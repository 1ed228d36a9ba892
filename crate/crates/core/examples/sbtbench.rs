// temporary bench: measure sbt step time scaling
use mas_core::sbt::*;
use mas_core::rng::SeedRng;

fn main() {
    let vocabs = SegmentVocabs { text: 512, scene: 512, image: 512 };
    let cfg = SbtConfig::desk(vocabs);
    let mut rng = SeedRng::new(1);
    let mk = |rng: &mut SeedRng| {
        let t: Vec<u32> = (0..16).map(|_| rng.below(512) as u32).collect();
        let y: Vec<u32> = (0..64).map(|_| rng.below(512) as u32).collect();
        let z: Vec<u32> = (0..64).map(|_| rng.below(512) as u32).collect();
        pack(&t, &y, &z, cfg.lengths, cfg.vocabs).unwrap()
    };
    for batch in [3usize, 6, 12] {
        let seqs: Vec<TokenSequence> = (0..batch).map(|_| mk(&mut rng)).collect();
        let mut model = SbtModel::new(cfg.clone(), 2).unwrap();
        let tcfg = TrainConfig::desk();
        let mut r2 = SeedRng::new(3);
        // warmup
        model.train_step(&seqs, &tcfg, CfMode::Off, &mut r2).unwrap();
        let t0 = std::time::Instant::now();
        let n = 6;
        for _ in 0..n {
            model.train_step(&seqs, &tcfg, CfMode::Off, &mut r2).unwrap();
        }
        let per = t0.elapsed().as_secs_f64() / n as f64;
        // forward only
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let t1 = std::time::Instant::now();
        for _ in 0..n { let _ = model.forward_logits(refs[0]); }
        let fwd1 = t1.elapsed().as_secs_f64() / n as f64;
        println!("batch {batch}: {per:.3} s/step, single-seq fwd {fwd1:.3}s");
    }
}
