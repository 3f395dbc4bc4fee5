#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "gsavatar.h"

#define CHECK(call)                                                              \
    do {                                                                         \
        GsaStatus s_ = (call);                                                   \
        if (s_ != GSA_STATUS_OK) {                                               \
            fprintf(stderr, "%s failed with %d: %s\n", #call, (int)s_, gsa_last_error()); \
            return 1;                                                            \
        }                                                                        \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke <dir>\n");
        return 2;
    }
    char path[4096];
    const char *root = argv[1];
    printf("gsavatar %s\n", gsa_version());

    CHECK(gsa_synth(root, 1, 1, 20, 7));

    GsaAvatar *avatar = NULL;
    snprintf(path, sizeof path, "%s/ground_truth", root);
    CHECK(gsa_avatar_load(path, &avatar));

    GsaPose *pose = NULL;
    snprintf(path, sizeof path, "%s/poses/000001.json", root);
    CHECK(gsa_pose_load(path, &pose));

    GsaCamera *camera = NULL;
    snprintf(path, sizeof path, "%s/camera.json", root);
    CHECK(gsa_camera_load(path, &camera));

    uint32_t w = 0, h = 0;
    CHECK(gsa_camera_size(camera, &w, &h));
    size_t n = (size_t)w * h;
    double *color = calloc(3 * n, sizeof(double));
    double *alpha = calloc(n, sizeof(double));
    double background[3] = {0.0, 0.0, 0.0};
    CHECK(gsa_render(avatar, pose, camera, background, n, color, NULL, alpha));

    size_t covered = 0;
    for (size_t i = 0; i < n; ++i) {
        if (alpha[i] > 0.5) {
            ++covered;
        }
    }
    printf("gaussians %zu, covered pixels %zu of %zu\n", gsa_avatar_num_gaussians(avatar), covered, n);

    double psnr = 0.0, ssim = 0.0;
    CHECK(gsa_evaluate(avatar, root, NULL, &psnr, &ssim));
    printf("psnr %.2f ssim %.4f\n", psnr, ssim);

    /* Failures report a status and a message. */
    GsaAvatar *missing = NULL;
    GsaStatus s = gsa_avatar_load("/nonexistent/archive", &missing);
    int ok = covered > 0 && psnr > 40.0 && s == GSA_STATUS_IO && missing == NULL && strlen(gsa_last_error()) > 0;
    if (gsa_render(avatar, pose, camera, NULL, n - 1, color, NULL, NULL) != GSA_STATUS_BUFFER_TOO_SMALL) {
        ok = 0;
    }

    free(color);
    free(alpha);
    gsa_pose_free(pose);
    gsa_camera_free(camera);
    gsa_avatar_free(avatar);
    return ok ? 0 : 1;
}
