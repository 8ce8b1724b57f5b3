use viar_wasm::demo::{budget_json, Demo};

#[test]
fn budget_json_matches_closed_form() {
    let v: serde_json::Value = serde_json::from_str(&budget_json("dec:20,5", 4, 5).unwrap()).unwrap();
    assert_eq!(v["budget"]["total"], 90);
    assert_eq!(v["next_scale_attention_ops"], 4369);
    assert_eq!(v["raster_attention_ops"], 89_440);
    assert!(budget_json("dec:5,20", 4, 5).is_err());
    assert!(budget_json("nonsense", 4, 5).is_err());
}

#[test]
fn train_then_sample() {
    let mut d = Demo::new(1).unwrap();
    let first = d.train(1).unwrap();
    let last = d.train(9).unwrap();
    assert_eq!(d.losses.len(), 10);
    assert!(first.is_finite() && last.is_finite());
    let v = d.sample(1, "con:3,3", 1.5, 0).unwrap();
    assert_eq!((v.width, v.height), (16, 16));
    assert_eq!(v.pixels.len(), 256);
    assert_eq!(v.steps, vec![3, 3, 3]);
    assert_eq!(v.cosines.len(), 3);
    assert_eq!(v.crossings[0].len(), 2);
    let again = d.sample(1, "con:3,3", 1.5, 0).unwrap();
    assert_eq!(v.pixels, again.pixels);
    assert!(d.sample(0, "con:3,4", 1.0, 0).is_err());
}
