use gpd_bench::{denoiser_case, predictor_checkpoint};
use gpd_core::denoiser::Strategy;
use gpd_core::tokenizer::{detokenize, tokenize_flat};

#[test]
fn checkpoint_round_trips() {
    let (descriptors, flat) = predictor_checkpoint();
    let seq = tokenize_flat(&flat, &descriptors).unwrap();
    assert_eq!((seq.len(), seq.width), (35, 6));
    assert_eq!(detokenize(&seq, &descriptors).unwrap(), flat);
}

#[test]
fn denoiser_cases_run_for_every_strategy() {
    for s in Strategy::ALL {
        let case = denoiser_case(s);
        let out = case.model.predict_noise(&case.tokens, &case.prompt, 250).unwrap();
        assert_eq!(out.dim(), case.tokens.dim());
        let (loss, grads) = case.model.loss_and_grads(&case.tokens, &case.prompt, 250, &case.eps).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.len(), case.model.params().len());
    }
}
