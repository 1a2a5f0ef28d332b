use std::fs;

use stnet_core::synthdata::{read_dataset, read_tensor, synthesize, write_dataset, VideoOptions};
use stnet_core::Error;

fn small() -> VideoOptions {
    VideoOptions {
        height: 32,
        width: 32,
        frames: 8,
        difficulty: 0.3,
    }
}

#[test]
fn round_trip_preserves_frames_and_quantized_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize(7, 3, &small()).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.meta, ds.meta);
    for (a, b) in ds.videos.iter().zip(&back.videos) {
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.seed, b.seed);
        assert!(b.occluded.is_none());
    }
}

#[test]
fn truncated_frame_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&synthesize(1, 1, &small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("video_0/frame_3.tnsr");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    let msg = err.to_string();
    assert!(msg.contains("frame_3.tnsr") && msg.contains("truncated"), "{msg}");
    assert!(read_tensor(&path).is_err());
}

#[test]
fn zero_width_annotation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&synthesize(1, 1, &small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("video_0/ann.txt");
    fs::write(&path, "2 0 0.5 0.5 0 0.2\n").unwrap();
    let msg = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("ann.txt") && msg.contains("line 1"), "{msg}");
}

#[test]
fn bad_magic_and_missing_meta() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path()).unwrap_err(), Error::Io { .. }));
    write_dataset(&synthesize(1, 1, &small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("video_0/frame_0.tnsr");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, bytes).unwrap();
    assert!(read_dataset(dir.path()).unwrap_err().to_string().contains("magic"));
}
