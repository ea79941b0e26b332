//! Build the three mesh prototypes, report their size and export them as OBJ.

use deblur3d::eval::object_size;
use deblur3d::geometry::{export_obj, laplacian_loss, make_prototype_with_texture};
use deblur3d::PrototypeKind;

fn main() -> anyhow::Result<()> {
    let out = std::env::temp_dir().join("deblur3d_prototypes");
    for kind in PrototypeKind::ALL {
        let mesh = make_prototype_with_texture(kind, 32);
        let path = out.join(format!("{kind}.obj"));
        export_obj(&mesh, &path)?;
        println!(
            "{kind}: {} vertices, {} faces, size {:.3}, laplacian {:.2e} -> {}",
            mesh.vertex_count(),
            mesh.faces.len(),
            object_size(&mesh.vertices())?,
            laplacian_loss(&mesh),
            path.display()
        );
    }
    Ok(())
}
