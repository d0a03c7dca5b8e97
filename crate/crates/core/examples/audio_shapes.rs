//! Output lengths of the five strided convs of the audio encoder, against the
//! published table.

use gim::encoder::{audit_conv_lengths, AUDIO_CONVS, AUDIO_INPUT_LEN, AUDIO_PUBLISHED_LENGTHS};

fn main() -> gim::Result<()> {
    println!("{:<6} {:>6} {:>6} {:>4} {:>7} {:>9} {:>10}", "layer", "kernel", "stride", "pad", "input", "computed", "published");
    for r in audit_conv_lengths(AUDIO_INPUT_LEN, &AUDIO_CONVS, &AUDIO_PUBLISHED_LENGTHS)? {
        let flag = if r.consistent() { "" } else { "  <- mismatch" };
        let published = r.published.map_or("-".into(), |p| p.to_string());
        println!("{:<6} {:>6} {:>6} {:>4} {:>7} {:>9} {published:>10}{flag}", r.layer + 1, r.kernel, r.stride, r.pad, r.input_len, r.computed);
    }
    Ok(())
}
