// quick probe: loss trajectory on one pair
use slt::model::*;
use slt::tensor::ParamStore;
use slt::train::*;
use slt::rng::seeded;

fn main() {
    let cfg = ModelConfig {
        encoder: EncoderConfig::Text(TextEncoderConfig { vocab: 10, embedding: 8, cell: 16 }),
        decoder: DecoderConfig { vocab: 10, embedding: 8, cell: 16, annotation_dim: 32, output_layer: None },
        namespace: DecoderNamespace::Target,
    };
    let mut store = ParamStore::new();
    let mut rng = seeded(22);
    let model = Model::init(cfg, &mut store, &mut rng).unwrap();
    let ex = Example { id: "x".into(), source: SourceData::Ids(vec![4,5,6,2]), target: vec![5,6,7,2] };
    let tc = TrainConfig { dropout: 0.0, symbol_dropout: 0.0, ..Default::default() };
    let mut adam = AdamState::new(AdamConfig::default(), store.len());
    let mut drng = seeded(23);
    for step in 0..1000 {
        let l = train_step(&mut store, &model, &[&ex], Task::Mt, &tc, &mut adam, &mut drng).unwrap();
        if step % 50 == 0 || step == 999 { println!("step {step}: {l}"); }
    }
}
