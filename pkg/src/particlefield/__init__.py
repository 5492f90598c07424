"""Online dynamic radiance fields on physics-driven particles.

Features live on movable particles inside the unit cube. Rendering
interpolates them with a compact bump kernel, a small MLP turns them into
density and color, and rays are alpha-composited. The photometric loss
backpropagates into the MLP, the features, and the particle positions; a
position-based dynamics step integrates the position gradients as velocities
while keeping particles apart.
"""

from .cameras import (
    Camera,
    Frame,
    FrameSequence,
    Ray,
    camera_from_dict,
    camera_rays,
    generate_ray,
    generate_rays,
    load_sequence,
    load_transforms,
    look_at,
    read_image,
    save_transforms,
    write_image,
)
from .encoding import (
    EncodingGradients,
    ParticleCloud,
    apply_rigid_transform,
    backpropagate_to_particles,
    bump_kernel,
    clip_position_gradients,
    init_particles,
    interpolate_feature,
    interpolate_features,
)
from .errors import ParticleFieldError
from .neighbors import (
    NeighborHit,
    SpatialIndex,
    brute_force_query,
    build_index,
    collision_pairs,
    query_pairs,
    query_radius,
)
from .network import (
    AdamState,
    FieldParams,
    adam_init,
    adam_step,
    encode_direction,
    encode_directions,
    field_backward,
    field_forward,
    init_field_params,
    step_field,
)
from .physics import PhysicsConfig, pbd_step, resolve_collisions
from .rendering import (
    OccupancyGrid,
    RenderConfig,
    composite_backward,
    composite_ray,
    density_probe,
    image_metrics,
    make_occupancy_grid,
    occupied_at,
    photometric_loss,
    psnr,
    render_rays,
    render_view,
    sample_along_ray,
    ssim,
    update_occupancy,
)
from .synth import SceneSpec, generate_synthetic_sequence, load_scene_spec
from .training import (
    MetricsLog,
    TrainConfig,
    TrainState,
    evaluate_frame,
    init_state,
    load_checkpoint,
    render_config,
    run_online_sequence,
    save_checkpoint,
    step_rng,
    train_step,
)

__version__ = "0.1.0"
