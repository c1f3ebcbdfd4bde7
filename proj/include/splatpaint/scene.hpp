#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace splatpaint {

inline constexpr int kFeatureDim = 16;
inline constexpr int kSh1Coeffs = 9;  // 3 direction terms x RGB

using Vec2d = Eigen::Vector2d;
using Vec3d = Eigen::Vector3d;
using Vec4d = Eigen::Vector4d;
using Mat2d = Eigen::Matrix2d;
using Mat3d = Eigen::Matrix3d;

struct ParameterDomainError : std::domain_error {
    using std::domain_error::domain_error;
};

/// One 3D Gaussian primitive. Parameters are stored float32 (the scene file
/// precision); all rendering math promotes to double.
struct GaussianSplat {
    Eigen::Vector3f position = Eigen::Vector3f::Zero();
    Eigen::Vector3f log_scale = Eigen::Vector3f::Zero();
    Eigen::Vector4f rotation = Eigen::Vector4f(1.f, 0.f, 0.f, 0.f);  // (w,x,y,z)
    Eigen::Vector3f color = Eigen::Vector3f::Zero();
    std::array<float, kSh1Coeffs> sh{};  // used only when the scene has sh_degree 1
    float opacity_logit = 0.f;
    Eigen::Matrix<float, kFeatureDim, 1> feature =
        Eigen::Matrix<float, kFeatureDim, 1>::Zero();

    float opacity() const { return 1.f / (1.f + std::exp(-opacity_logit)); }
};

struct Scene {
    std::uint8_t sh_degree = 0;  // 0 = plain RGB, 1 = adds 9 direction coefficients
    std::vector<GaussianSplat> splats;

    std::size_t size() const { return splats.size(); }
    bool empty() const { return splats.empty(); }
};

/// Half bounding-box diagonal of the splat positions; 1 for tiny scenes.
inline double scene_extent(const Scene& scene) {
    if (scene.empty()) return 1.0;
    Vec3d lo = scene.splats[0].position.cast<double>();
    Vec3d hi = lo;
    for (const auto& g : scene.splats) {
        lo = lo.cwiseMin(g.position.cast<double>());
        hi = hi.cwiseMax(g.position.cast<double>());
    }
    return std::max(0.5 * (hi - lo).norm(), 1.0);
}

/// Pinhole camera with a rigid world-to-camera transform:
/// x_cam = rot * x_world + trans. +z looks forward, +y down.
struct Camera {
    Mat3d rot = Mat3d::Identity();
    Vec3d trans = Vec3d::Zero();
    double fx = 100.0, fy = 100.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw ParameterDomainError("Camera: focal must be > 0");
        if (width < 8 || height < 8) throw ParameterDomainError("Camera: resolution must be >= 8");
    }

    Vec3d world_to_camera(const Vec3d& p) const { return rot * p + trans; }
    Vec3d camera_to_world(const Vec3d& p) const { return rot.transpose() * (p - trans); }
    Vec3d center() const { return -(rot.transpose() * trans); }

    /// Pixel coordinates of a camera-space point (z > 0 assumed).
    Vec2d project_cam(const Vec3d& pc) const {
        return {fx * pc.x() / pc.z() + cx, fy * pc.y() / pc.z() + cy};
    }

    /// World point seen at pixel (u,v) with camera depth z.
    Vec3d unproject(double u, double v, double z) const {
        const Vec3d pc((u - cx) * z / fx, (v - cy) * z / fy, z);
        return camera_to_world(pc);
    }
};

inline Vec4d normalized_quaternion(const Vec4d& q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n))
        throw ParameterDomainError("rotation quaternion must be non-zero and finite");
    return q / n;
}

/// Rotation matrix of a unit quaternion (w,x,y,z).
inline Mat3d rotation_from_unit_quaternion(const Vec4d& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// Sigma = R * diag(exp(ls))^2 * R^T. Symmetric positive definite for any
/// finite inputs; the quaternion is normalized internally.
inline Mat3d covariance_from_params(const Vec3d& log_scale, const Vec4d& rotation) {
    if (!log_scale.allFinite() || !rotation.allFinite())
        throw ParameterDomainError("covariance_from_params: non-finite input");
    const Mat3d r = rotation_from_unit_quaternion(normalized_quaternion(rotation));
    const Vec3d s = log_scale.array().exp();
    const Mat3d v = r * s.asDiagonal();
    return v * v.transpose();
}

/// 2D footprint of a projected Gaussian. cov2d carries the +eps diagonal
/// regularization, so its eigenvalues are >= eps by construction.
struct SplatFragment {
    Vec2d mean2d = Vec2d::Zero();
    Mat2d cov2d = Mat2d::Identity();
    double camera_depth = 0.0;
    std::uint32_t source_index = 0;
};

inline constexpr double kDefaultNearPlane = 0.01;
inline constexpr double kDefaultCov2dEps = 0.3;   // px^2, added to the cov2d diagonal
inline constexpr double kDefaultSupportSigma = 3.0;
// Fragments whose projected center lies further than this many image
// max-dimensions outside the frame are dropped: keeping them lets splats that
// drift next to a camera veil the whole frame with a near-flat Gaussian tail.
inline constexpr double kCenterCullMargin = 4.0;

/// Projects one Gaussian. Returns nothing when the center is at or behind the
/// near plane, or when the support_sigma ellipse bounding box misses the
/// image rectangle.
inline std::optional<SplatFragment> project_gaussian(const GaussianSplat& g, const Camera& cam,
                                                     double near_plane = kDefaultNearPlane,
                                                     double cov2d_eps = kDefaultCov2dEps,
                                                     double support_sigma = kDefaultSupportSigma,
                                                     std::uint32_t source_index = 0) {
    cam.validate();
    const Vec3d pc = cam.world_to_camera(g.position.cast<double>());
    const double z = pc.z();
    if (!(z > near_plane)) return std::nullopt;

    SplatFragment frag;
    frag.mean2d = cam.project_cam(pc);
    frag.camera_depth = z;
    frag.source_index = source_index;

    const double margin = kCenterCullMargin * std::max(cam.width, cam.height);
    if (frag.mean2d.x() < -margin || frag.mean2d.x() > cam.width - 1 + margin ||
        frag.mean2d.y() < -margin || frag.mean2d.y() > cam.height - 1 + margin)
        return std::nullopt;

    const Mat3d sigma =
        covariance_from_params(g.log_scale.cast<double>(), g.rotation.cast<double>());
    Eigen::Matrix<double, 2, 3> jac;
    jac << cam.fx / z, 0.0, -cam.fx * pc.x() / (z * z),
        0.0, cam.fy / z, -cam.fy * pc.y() / (z * z);
    const Eigen::Matrix<double, 2, 3> t = jac * cam.rot;
    frag.cov2d = t * sigma * t.transpose();
    frag.cov2d(0, 0) += cov2d_eps;
    frag.cov2d(1, 1) += cov2d_eps;

    // Conservative cull: axis-aligned box around the support ellipse.
    const double rx = support_sigma * std::sqrt(frag.cov2d(0, 0));
    const double ry = support_sigma * std::sqrt(frag.cov2d(1, 1));
    if (frag.mean2d.x() + rx < 0.0 || frag.mean2d.x() - rx > cam.width - 1 ||
        frag.mean2d.y() + ry < 0.0 || frag.mean2d.y() - ry > cam.height - 1)
        return std::nullopt;
    return frag;
}

}  // namespace splatpaint
