//! `scancad`: data generation, training, embedding, retrieval, evaluation and
//! the annotation service behind one command.

use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use scancad::autodiff::{read_checkpoint_file, write_checkpoint_file, Checkpoint};
use scancad::benchmark::{
    build_tasks, evaluate, paired_confusion_set, read_annotations, render_table, CatalogCad, DEFAULT_MIN_SUPPORT,
};
use scancad::datagen::{
    generate_catalog_cads, generate_dataset, load_all_pairs, read_catalog, write_catalog, write_pairs, Category,
    DatasetSpec, CATALOG_FILE,
};
use scancad::embedspace::{read_embeddings_file, write_embeddings_file, Domain, EmbeddingIndex, EmbeddingVector};
use scancad::nets::{grid_tensor, ArchitectureConfig, HourglassModel, ProposalAutoencoder, Stages};
use scancad::trainer::{train, train_autoencoder, Preset, TrainConfig, FINAL_CHECKPOINT};
use scancad::voxel::{read_grid_file, rotate_up_axis, voxelize, write_grid_file, Dims, GridDomain, OccupancyGrid,
    TriangleSoup, ROTATION_STEPS};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] scancad::Error),
    #[error(transparent)]
    Service(#[from] annotserve::ServiceError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot load mesh: {0}")]
    Mesh(#[from] tobj::LoadError),
    #[error("{0}")]
    Usage(String),
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "scancad", version, about = "Joint scan/CAD embedding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConfigArg {
    Tiny,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    Scan,
    Cad,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Surface-voxelize an OBJ mesh into an SCVX grid.
    Voxelize {
        mesh: PathBuf,
        grid: PathBuf,
        #[arg(long, default_value_t = 32)]
        dims: usize,
        /// Object id stored in the grid (defaults to the file stem).
        #[arg(long)]
        id: Option<String>,
    },
    /// Generate synthetic scan/CAD pairs and a CAD catalog.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.4)]
        clutter: f64,
        #[arg(long, default_value_t = 0.3)]
        dropout: f64,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Comma-separated category names (default: all).
        #[arg(long, value_delimiter = ',')]
        categories: Vec<String>,
        /// Unpaired CAD models added to the catalog.
        #[arg(long, default_value_t = 150)]
        extra_cads: usize,
    },
    /// Train the stacked hourglass.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "tiny")]
        config: ConfigArg,
        #[arg(long)]
        rotations: bool,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Skip the segmentation hourglass.
        #[arg(long)]
        no_seg: bool,
        /// Skip the completion hourglass.
        #[arg(long)]
        no_cmpl: bool,
        /// Train on positive pairs only.
        #[arg(long)]
        no_triplet: bool,
    },
    /// Train the CAD autoencoder whose latents drive proposal sampling.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "tiny")]
        config: ConfigArg,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embed every scan and/or CAD model of a data directory. An autoencoder
    /// checkpoint embeds the catalog CAD models into its latent space.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
        /// Also emit the 12 rotated copies of every CAD model.
        #[arg(long)]
        rotations: bool,
    },
    /// Print the nearest neighbours of one embedded object.
    Retrieve {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        query_id: String,
        #[arg(short, default_value_t = 4)]
        k: usize,
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
    },
    /// Score embeddings against an annotation file.
    Evaluate {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
        min_support: usize,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "SCANCAD_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long, env = "SCANCAD_ANNOTATIONS_FILE")]
        annotations_file: Option<PathBuf>,
        #[arg(long, env = "SCANCAD_LEASE_MINUTES", default_value_t = 15)]
        lease_minutes: u64,
        #[arg(long, env = "SCANCAD_SEED", default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Voxelize { mesh, grid, dims, id } => cmd_voxelize(&mesh, &grid, dims, id),
        Command::GenData {
            out,
            pairs,
            seed,
            clutter,
            dropout,
            noise,
            categories,
            extra_cads,
        } => {
            let categories = parse_categories(&categories)?;
            let mut spec = DatasetSpec::new(pairs, seed);
            spec.clutter_density = clutter;
            spec.dropout_fraction = dropout;
            spec.noise_flip_prob = noise;
            if !categories.is_empty() {
                spec.categories = categories;
            }
            let samples = generate_dataset(&spec)?;
            write_pairs(&out, &samples)?;
            let extra = generate_catalog_cads(extra_cads, seed, &spec.categories);
            write_catalog(&out, &samples, &extra)?;
            println!("wrote {} pairs and {} catalog CAD models to {}", samples.len(), samples.len() + extra.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            out,
            config,
            rotations,
            iterations,
            batch,
            margin,
            seed,
            checkpoint_every,
            no_seg,
            no_cmpl,
            no_triplet,
        } => {
            let (arch, mut cfg) = presets(config, rotations);
            cfg.seed = seed;
            cfg.max_iterations = iterations.unwrap_or(cfg.max_iterations);
            cfg.batch_size = batch.unwrap_or(cfg.batch_size);
            cfg.margin = margin.unwrap_or(cfg.margin);
            cfg.checkpoint_every = checkpoint_every;
            cfg.triplet = !no_triplet;
            let stages = Stages {
                segmentation: !no_seg,
                completion: !no_cmpl,
            };
            let pairs = load_all_pairs(&data)?;
            let model = HourglassModel::init(arch, stages, seed)?;
            let report = train(model, pairs, cfg, Some(&out))?;
            if let Some(last) = report.metrics.last() {
                println!(
                    "iteration {} loss {:.6} (seg {:.6} cmp {:.6} trip {:.6})",
                    last.iteration + 1,
                    last.total,
                    last.l_seg,
                    last.l_cmp,
                    last.l_trip
                );
            }
            println!("checkpoint {}", out.join(FINAL_CHECKPOINT).display());
            Ok(())
        }
        Command::TrainAe {
            data,
            out,
            config,
            iterations,
            batch,
            seed,
        } => {
            let (arch, mut cfg) = presets(config, false);
            cfg.seed = seed;
            cfg.max_iterations = iterations.unwrap_or(cfg.max_iterations);
            cfg.batch_size = batch.unwrap_or(cfg.batch_size);
            let cads: Vec<OccupancyGrid> = catalog_grids(&data)?.into_iter().map(|(g, _)| g).collect();
            let mut ae = ProposalAutoencoder::init(arch, seed)?;
            let (adam, losses) = train_autoencoder(&mut ae, &cads, &cfg)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(FINAL_CHECKPOINT);
            write_checkpoint_file(
                &path,
                &Checkpoint {
                    iteration: cfg.max_iterations,
                    params: ae.params,
                    adam,
                },
            )?;
            if let Some(l) = losses.last() {
                println!("final reconstruction loss {l:.6}");
            }
            println!("checkpoint {}", path.display());
            Ok(())
        }
        Command::Embed {
            checkpoint,
            data,
            out,
            domain,
            rotations,
        } => {
            let index = cmd_embed(&checkpoint, &data, domain, rotations)?;
            write_embeddings_file(&out, &index)?;
            println!("wrote {} embeddings to {}", index.len(), out.display());
            Ok(())
        }
        Command::Retrieve {
            embeddings,
            query_id,
            k,
            domain,
        } => {
            let index = read_embeddings_file(&embeddings)?;
            let query = match domain {
                Some(d) => index
                    .get(&query_id, to_domain(d))
                    .ok_or_else(|| scancad::Error::UnknownId(query_id.clone()))?,
                None => index.find(&query_id)?,
            };
            println!("query {} ({}, {})", query.id, query.domain, query.category);
            for (rank, n) in index.knn(query, k, true)?.iter().enumerate() {
                println!("{:>3}  {:<24} {:<5} {:<12} {:.6}", rank + 1, n.id, n.domain, n.category, n.distance);
            }
            Ok(())
        }
        Command::Evaluate {
            embeddings,
            annotations,
            catalog,
            seed,
            json,
            min_support,
        } => {
            let index = read_embeddings_file(&embeddings)?;
            let records = read_annotations(&annotations)?;
            let catalog: Vec<CatalogCad> = read_catalog(&catalog)?.iter().map(CatalogCad::from).collect();
            let tasks = build_tasks(&records, &catalog, seed)?;
            let confusion = paired_confusion_set(&index)?;
            let report = evaluate(&tasks, &index, &index, Some(&confusion))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(scancad::Error::from)?);
            } else {
                print!("{}", render_table(&report, min_support));
            }
            Ok(())
        }
        Command::Serve {
            port,
            data_dir,
            annotations_file,
            lease_minutes,
            seed,
        } => {
            let mut cfg = annotserve::ServiceConfig::new(&data_dir);
            cfg.annotations_file = annotserve::annotations_path(&data_dir, annotations_file.as_deref());
            cfg.lease = Duration::from_secs(lease_minutes * 60);
            cfg.seed = seed;
            let service = annotserve::Service::open(cfg)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(annotserve::serve(
                service,
                SocketAddr::from((Ipv4Addr::UNSPECIFIED, port)),
                |addr| println!("listening on http://{addr}"),
            ))?;
            Ok(())
        }
    }
}

fn presets(config: ConfigArg, rotations: bool) -> (ArchitectureConfig, TrainConfig) {
    match config {
        ConfigArg::Tiny => (ArchitectureConfig::tiny(), TrainConfig::preset(Preset::Tiny, rotations)),
        ConfigArg::Paper => (ArchitectureConfig::full(), TrainConfig::preset(Preset::Paper, rotations)),
    }
}

fn to_domain(d: DomainArg) -> Domain {
    match d {
        DomainArg::Scan => Domain::Scan,
        DomainArg::Cad => Domain::Cad,
    }
}

fn parse_categories(names: &[String]) -> Result<Vec<Category>> {
    names
        .iter()
        .map(|n| n.parse::<Category>().map_err(|_| CliError::Usage(format!("unknown category `{n}`"))))
        .collect()
}

fn cmd_voxelize(mesh: &Path, out: &Path, dims: usize, id: Option<String>) -> Result<()> {
    let (models, _) = tobj::load_obj(mesh, &tobj::GPU_LOAD_OPTIONS)?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for m in &models {
        let base = vertices.len();
        vertices.extend(m.mesh.positions.chunks_exact(3).map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]));
        triangles.extend(
            m.mesh
                .indices
                .chunks_exact(3)
                .map(|t| [base + t[0] as usize, base + t[1] as usize, base + t[2] as usize]),
        );
    }
    let soup = TriangleSoup::new(vertices, triangles)?;
    let id = id.unwrap_or_else(|| mesh.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let grid = voxelize(&soup, Dims::cube(dims))?.with_identity(id, GridDomain::Cad);
    write_grid_file(out, &grid)?;
    println!("{} occupied voxels of {}", grid.count(), grid.dims());
    Ok(())
}

/// CAD grids of a data directory: the catalog when present, else the paired
/// CAD models of the manifest.
fn catalog_grids(data: &Path) -> Result<Vec<(OccupancyGrid, String)>> {
    if data.join(CATALOG_FILE).exists() || data.ends_with(CATALOG_FILE) {
        read_catalog(data)?
            .into_iter()
            .map(|e| Ok((read_grid_file(&e.path)?.with_identity(e.cad_id, GridDomain::Cad), e.category)))
            .collect()
    } else {
        Ok(load_all_pairs(data)?
            .into_iter()
            .map(|p| (p.cad.with_identity(format!("{}_cad", p.id), GridDomain::Cad), p.category))
            .collect())
    }
}

fn cmd_embed(checkpoint: &Path, data: &Path, domain: Option<DomainArg>, rotations: bool) -> Result<EmbeddingIndex> {
    let ckpt = read_checkpoint_file(checkpoint)?;
    let steps = if rotations { ROTATION_STEPS } else { 1 };
    if ckpt.params.contains(&format!("{}.init.weight", scancad::nets::AE_ENCODER)) {
        if matches!(domain, Some(DomainArg::Scan)) {
            return Err(CliError::Usage("an autoencoder checkpoint only embeds CAD models".into()));
        }
        let ae = ProposalAutoencoder::from_params(ckpt.params)?;
        let mut index = EmbeddingIndex::new(ae.config.embed_dim);
        for (grid, category) in catalog_grids(data)? {
            for step in 0..steps {
                let (latent, _) = ae.autoencode(&grid_tensor(&rotate_up_axis(&grid, step)?))?;
                let v = EmbeddingVector::new(grid.object_id(), Domain::Cad, &category, latent.data().to_vec());
                index.push(v.with_rotation(step))?;
            }
        }
        return Ok(index);
    }
    let model = HourglassModel::from_params(ckpt.params)?;
    let mut index = EmbeddingIndex::new(model.config.embed_dim);
    if !matches!(domain, Some(DomainArg::Cad)) {
        for p in load_all_pairs(data)? {
            let e = model.embed_scan(&grid_tensor(&p.scan))?;
            index.push(EmbeddingVector::new(format!("{}_scan", p.id), Domain::Scan, &p.category, e.embedding))?;
        }
    }
    if !matches!(domain, Some(DomainArg::Scan)) {
        for (grid, category) in catalog_grids(data)? {
            for step in 0..steps {
                let values = model.embed_cad(&grid_tensor(&rotate_up_axis(&grid, step)?))?;
                let v = EmbeddingVector::new(grid.object_id(), Domain::Cad, &category, values);
                index.push(v.with_rotation(step))?;
            }
        }
    }
    Ok(index)
}
