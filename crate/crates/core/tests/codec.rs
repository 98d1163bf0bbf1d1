mod common;

use nervlab::codec::{bpp, compress_model, decompress_model, quantize_params, raw_bpp, Bitstream};
use nervlab::components::{presets, NervModel};
use nervlab::metrics::psnr;
use nervlab::trainer::{train, Budget, TrainOptions};
use nervlab::video::VideoTensor;

use common::{codec_instance, rng, uniform_symbol_bytes, CODEC_INSTANCES, UNIFORM_BYTE_TOL};

#[test]
fn random_tensors_round_trip() {
    let mut r = rng(21);
    for i in 0..CODEC_INSTANCES {
        codec_instance(&mut r).unwrap_or_else(|e| panic!("instance {i}: {e}"));
    }
}

#[test]
fn uniform_symbols_cost_one_byte() {
    let per_symbol = uniform_symbol_bytes(22);
    assert!((per_symbol - 1.0).abs() <= UNIFORM_BYTE_TOL, "{per_symbol} bytes/symbol");
}

fn trained_desk() -> (NervModel<f32>, VideoTensor<f32>) {
    let video = VideoTensor::<f32>::synthetic(4, 32, 64, 5);
    let mut model = NervModel::<f32>::new(&presets::rnerv_desk([32, 64], 6), 5).unwrap();
    train(&mut model, &video, &Budget::Epochs { amount: 40 }, &TrainOptions::default()).unwrap();
    (model, video)
}

#[test]
fn fewer_bits_trade_quality_for_size() {
    let (model, video) = trained_desk();
    let (t, h, w) = (video.num_frames(), video.height(), video.width());
    let mut rows = Vec::new();
    for bits in [8, 4] {
        let bs = Bitstream::from_bytes(&compress_model(&model, bits).unwrap().to_bytes()).unwrap();
        let dec = decompress_model::<f32>(&bs).unwrap();
        assert_eq!(dec.params(), &quantize_params(model.params(), bits).unwrap());
        let quality = psnr(&dec.render_video(t, video.frame_rate).unwrap(), &video).unwrap();
        let coded = bpp(bs.payload_bytes() as u64 * 8, t, h, w).unwrap();
        let naive = raw_bpp(bs.num_params(), bits, t, h, w).unwrap();
        assert!(coded <= naive, "{bits} bits: coded {coded} > naive {naive}");
        rows.push((bs.payload_bytes(), quality));
    }
    let (full, low) = (rows[0], rows[1]);
    assert!(full.0 > low.0, "8-bit payload {} not above 4-bit {}", full.0, low.0);
    assert!(full.1 > low.1, "8-bit PSNR {} not above 4-bit {}", full.1, low.1);
}

#[test]
fn corrupted_streams_are_rejected() {
    let model = NervModel::<f32>::new(&presets::rnerv_desk([32, 64], 6), 1).unwrap();
    let bytes = compress_model(&model, 6).unwrap().to_bytes();
    assert!(Bitstream::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Bitstream::from_bytes(&bad).is_err());
}
