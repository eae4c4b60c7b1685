// The scene-flow network: multi-scale point encoder, per-level point and
// traffic embeddings, TVF encoder/decoder, flow head, PointGRU and the
// ego-motion / motion-segmentation heads.

#ifndef TARS_MODEL_HPP
#define TARS_MODEL_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tars/autodiff.hpp"
#include "tars/blocks.hpp"
#include "tars/geometry.hpp"
#include "tars/losses.hpp"
#include "tars/od_stub.hpp"
#include "tars/param_store.hpp"

namespace tars {

enum class Variant { kEgo, kSuperEgo, kNoEgo };

std::string to_string(Variant v);
std::string to_string(Supervision s);
Variant variant_from_string(const std::string& s);
Supervision supervision_from_string(const std::string& s);

struct TarsConfig {
  int levels = 2;            // L
  int gamma = 2;
  int point_channels = 16;   // C
  int flow_channels = 32;    // D
  int tvf_channels = 16;     // D_TVF
  int axial_blocks = 1;      // omega
  int k_cross = 8;           // N_Q
  int k_tvf = 9;             // N_TVF
  int clip_length = 3;       // T
  GridSpec grid{Vec2(0.0, -16.0), 4.0, 8, 8};
  Variant variant = Variant::kSuperEgo;
  Supervision supervision = Supervision::kCrossPlus;

  bool use_tvf = true;       // false: point-level embeddings only
  bool use_od = true;        // false: no detector features in the scene update
  bool decoder_pe = true;
  int od_channels = 32;
  int k_encoder = 8;         // set-abstraction neighbourhood
  int k_interp = 3;
  int k_gru = 3;
  double position_scale = 10.0;  // input feature normalisation
  double rrv_scale = 5.0;
  double rcs_scale = 10.0;

  void validate() const;
  /// N_l for l = 1..L (index l-1).
  std::vector<int> level_sizes(int n) const;
};

/// Points, features and outputs of one hierarchy level.
struct LevelState {
  int level = 0;
  std::vector<int> p_index;  // rows of the full P cloud
  std::vector<int> q_index;
  std::vector<Vec3> p_points;
  std::vector<Vec3> q_points;
  ad::Var p_feat;
  ad::Var q_feat;
  ad::Var flow;       // F^l, filled by the forward pass
  ad::Var embedding;  // e^l
};

struct TVFState {
  ad::Var field;  // H*W x D_TVF
  GridSpec grid;
  int level = 0;
};

/// PointGRU hidden features keyed to the point positions they came from.
struct TemporalHidden {
  std::vector<Vec3> positions;
  ad::Var features;
  bool empty() const { return positions.empty(); }
};

struct EgoEstimate {
  ad::Var rotation;     // 3 x 3
  ad::Var translation;  // 1 x 3
  SE3Transform transform() const;
};

struct ForwardInputs {
  const PointCloud* p = nullptr;
  const PointCloud* q = nullptr;
  const TemporalHidden* hidden = nullptr;  // null or empty for the first pair of a clip
  const BEVPyramid* od = nullptr;
  /// Static/moving assignment for the ego step (1 = static). When absent the
  /// segmentation head decides (static iff S <= 0.5).
  const std::vector<std::uint8_t>* static_override = nullptr;
};

struct ForwardOutput {
  std::vector<LevelState> levels;  // index l-1
  std::vector<TVFState> tvf;       // levels 2..L when the TVF is enabled
  ad::Var flow;                    // final F^L (after the ego step for the ego variant)
  ad::Var head_flow;               // F^L before the ego step
  ad::Var seg;                     // N x 1, ego variant only
  std::optional<EgoEstimate> ego;
  std::vector<std::uint8_t> static_mask;  // mask used by the ego step
  TemporalHidden hidden;
};

struct PointGruResult {
  ad::Var features;
  TemporalHidden hidden;
};

class TarsModel {
 public:
  explicit TarsModel(TarsConfig cfg);

  const TarsConfig& config() const { return cfg_; }
  void init_params(ParamStore& params, std::uint64_t seed) const;

  /// Raw (x, y, z, rrv, rcs) input rows, normalised.
  ad::Tensor raw_features(const PointCloud& cloud) const;
  ad::Var input_features(ad::Graph& g, const ParamStore& params, const PointCloud& cloud) const;

  PointGruResult point_gru_step(ad::Graph& g, const ParamStore& params, ad::Var features,
                                std::span<const Vec3> positions, const TemporalHidden& hidden) const;

  std::vector<LevelState> multi_scale_encoder(ad::Graph& g, const ParamStore& params,
                                              std::span<const Vec3> p, ad::Var p_feat,
                                              std::span<const Vec3> q, ad::Var q_feat) const;

  ad::Var point_level_embeddings(ad::Graph& g, const ParamStore& params, const LevelState& level,
                                 ad::Var coarse_flow) const;

  /// `prev` must carry flow and embedding. `od_map` may be null.
  TVFState tvf_encode(ad::Graph& g, const ParamStore& params, int level, const LevelState& prev,
                      const BEVLevel* od_map, const TVFState* prev_tvf) const;

  /// `p_warp` is the N x 3 warped cloud; offsets to cell centres stay differentiable.
  ad::Var tvf_decode(ad::Graph& g, const ParamStore& params, int level, ad::Var p_warp, ad::Var query,
                     const TVFState& tvf) const;

  struct HeadOutput {
    ad::Var flow;
    ad::Var embedding;
  };
  /// `prev_embedding` / `traffic` are invalid Vars when absent.
  HeadOutput flow_head(ad::Graph& g, const ParamStore& params, int level, std::span<const Vec3> points,
                       ad::Var e_point, ad::Var prev_embedding, ad::Var traffic,
                       ad::Var coarse_flow) const;

  ad::Var motion_segmentation_head(ad::Graph& g, const ParamStore& params, ad::Var embedding) const;

  ForwardOutput forward(ad::Graph& g, const ParamStore& params, const ForwardInputs& in) const;

  /// Per-level inverse-distance interpolation from level l-1 onto level l.
  InterpWeights upsample_weights(const LevelState& coarse, const LevelState& fine) const;

  // Layer descriptors, exposed so tests can reach individual parameters.
  blocks::Mlp input_mlp() const;
  blocks::Mlp encoder_mlp(int level) const;
  blocks::Linear gru_gate(const std::string& which) const;
  blocks::Attention cross_attention(int level) const;
  blocks::Attention self_attention(int level) const;
  blocks::Conv2d od_adapter(int level) const;
  blocks::ConvGru scene_update(int level) const;
  blocks::PointToGridAttention flow_painting(int level) const;
  blocks::SpatialAttentionFusion fusion(int level) const;
  blocks::AxialAttentionBlock axial(int level, int block) const;
  blocks::Attention decoder_attention(int level) const;
  blocks::Attention head_attention(int level) const;
  blocks::Linear head_reduce(int level) const;
  blocks::Linear head_out(int level) const;
  blocks::Mlp seg_mlp() const;
  int head_width(int level) const;

 private:
  TarsConfig cfg_;
};

/// Differentiable weighted Kabsch: finds (R, t) minimising
/// sum w_i |R p_i + t - p_warp_i|^2. Needs at least three points with
/// positive weight and a non-degenerate (non-collinear) layout.
EgoEstimate ego_motion_head(ad::Graph& g, std::span<const Vec3> p, ad::Var p_warp, ad::Var weights);

/// Binary mask from probabilities: moving iff S > 0.5.
std::vector<std::uint8_t> moving_from_probability(const ad::Tensor& s);

}  // namespace tars

#endif  // TARS_MODEL_HPP
