use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::episodes::UserTask;
use crate::error::{Error, Result};
use crate::preprocess::{preprocess_signature, CanonicalImage, RawImage};
use crate::synthdata::RawUser;

const EXTENSIONS: [&str; 4] = ["png", "pgm", "pnm", "pbm"];

/// Users read from disk plus the number of image files that were skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub users: Vec<UserTask>,
    pub skipped: usize,
}

/// Reads a PNG or PGM file as 8-bit grey.
pub fn read_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    RawImage::new(h as usize, w as usize, img.into_raw())
}

/// Image files of a folder ordered by numeric stem, then by name.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    let key = |p: &PathBuf| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        (stem.parse::<u64>().ok(), stem)
    };
    files.sort_by_key(|p| {
        let (n, s) = key(p);
        (n.is_none(), n.unwrap_or(0), s)
    });
    Ok(files)
}

fn load_folder(dir: &Path) -> Result<(Vec<CanonicalImage>, usize)> {
    let mut images = Vec::new();
    let mut skipped = 0;
    for path in image_files(dir)? {
        match read_image(&path).and_then(|raw| preprocess_signature(&raw)) {
            Ok(img) => images.push(img),
            Err(_) => skipped += 1,
        }
    }
    Ok((images, skipped))
}

/// Loads `root/<user_id>/genuine/*` and `root/<user_id>/forgery/*`,
/// preprocessing every image. Users are ordered by numeric id; folders whose
/// name is not a number are ignored.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let mut ids: Vec<(u32, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.parse().ok())
                .map(|id| (id, e.path()))
        })
        .collect();
    ids.sort_by_key(|(id, _)| *id);
    if ids.is_empty() {
        return Err(Error::Data(format!("no user folders under {}", root.display())));
    }
    let loaded = ids
        .par_iter()
        .map(|(id, dir)| -> Result<(UserTask, usize)> {
            let gdir = dir.join("genuine");
            let (genuine, mut skipped) = if gdir.is_dir() {
                load_folder(&gdir)?
            } else {
                (Vec::new(), 0)
            };
            if genuine.is_empty() {
                return Err(Error::Data(format!("user {id} has no readable genuine signatures")));
            }
            let fdir = dir.join("forgery");
            let skilled = if fdir.is_dir() {
                let (s, n) = load_folder(&fdir)?;
                skipped += n;
                s
            } else {
                Vec::new()
            };
            Ok((UserTask::new(*id, genuine, skilled)?, skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = loaded.iter().map(|(_, n)| n).sum();
    Ok(LoadedDataset {
        users: loaded.into_iter().map(|(u, _)| u).collect(),
        skipped,
    })
}

fn write_png(path: &Path, img: &RawImage) -> Result<()> {
    image::save_buffer(
        path,
        img.pixels(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Writes raw renderings in the layout read by [`load_dataset`].
pub fn write_dataset(root: &Path, users: &[RawUser]) -> Result<()> {
    users.par_iter().try_for_each(|u| -> Result<()> {
        let base = root.join(u.user_id.to_string());
        for (sub, images) in [("genuine", &u.genuine), ("forgery", &u.skilled)] {
            if images.is_empty() {
                continue;
            }
            let dir = base.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, img) in images.iter().enumerate() {
                write_png(&dir.join(format!("{i}.png")), img)?;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_user, render_user, SynthUserSpec};

    fn spec(id: u32) -> SynthUserSpec {
        SynthUserSpec {
            n_genuine: 3,
            n_skilled: 2,
            ..SynthUserSpec::new(id, 40 + id as u64)
        }
    }

    #[test]
    fn export_then_load_reproduces_generation() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<RawUser> = [2, 10, 1].iter().map(|&i| render_user(&spec(i)).unwrap()).collect();
        write_dataset(dir.path(), &raw).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.skipped, 0);
        assert_eq!(
            loaded.users.iter().map(|u| u.user_id).collect::<Vec<_>>(),
            vec![1, 2, 10]
        );
        assert_eq!(loaded.users[0], generate_user(&spec(1)).unwrap());
        assert_eq!(loaded, load_dataset(dir.path()).unwrap());
    }

    #[test]
    fn missing_forgeries_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut u = render_user(&spec(0)).unwrap();
        u.skilled.clear();
        write_dataset(dir.path(), &[u]).unwrap();
        fs::write(dir.path().join("0/genuine/7.png"), b"not a png").unwrap();
        fs::write(dir.path().join("0/genuine/notes.txt"), b"ignored").unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.skipped, 1);
        assert_eq!(loaded.users[0].genuine.len(), 3);
        assert!(!loaded.users[0].forgery_available);

        fs::create_dir_all(dir.path().join("5/genuine")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Data(m)) => assert!(m.contains("user 5"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pgm_files_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let mut px = vec![255u8; 40 * 60];
        for r in 10..30 {
            px[r * 60 + 20] = 0;
        }
        image::save_buffer(&path, &px, 60, 40, image::ExtendedColorType::L8).unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!((img.height(), img.width()), (40, 60));
        assert_eq!(img.pixels(), &px[..]);
    }
}
