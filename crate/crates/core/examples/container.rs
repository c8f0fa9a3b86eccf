//! Saves a model container, reads it back, folds batch norm and shows how
//! the byte count splits between header and weights.

use edgequant::graph::{build_architecture, fold_batchnorm, load, save, serialize, serialized_len, Family};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = build_architecture(Family::MobileNetV2, 5, (224, 224), 1)?;
    let dir = std::env::temp_dir().join(format!("edgequant-container-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("mobilenet_v2.eqm");
    save(&g, &path)?;
    let back = load(&path)?;
    println!("wrote {} ({} bytes)", path.display(), serialized_len(&g));
    println!("round trip bit-identical: {}", serialize(&back) == serialize(&g));

    let weights = 4 * g.weight_elements() as usize;
    println!("weights {weights} bytes, header and padding {} bytes", serialized_len(&g) - weights);

    let folded = fold_batchnorm(&g)?;
    println!(
        "batch norm folded: {} -> {} nodes, {} -> {} parameters",
        g.nodes.len(),
        folded.nodes.len(),
        g.param_count(),
        folded.param_count()
    );
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
