// Paints an ink blot on a generated tissue patch, finds it with the
// threshold detector and restores it. Writes clean | corrupted | restored.
//
//   restore_demo [model.bin | ""] [out.png]
//
// Without a checkpoint a small 32x32 model is trained first (under a minute
// on one core); restorations from it are blurry but show the mechanics.

#include <chrono>
#include <cstdio>
#include <string>

#include "artfix/artfix.hpp"
#include "artfix/image_io.hpp"
#include "artfix/train.hpp"

using namespace artfix;

int main(int argc, char** argv) {
  const std::string out = argc > 2 ? argv[2] : "restore_demo.png";
  Checkpoint ck;
  if (argc > 1 && *argv[1]) {
    ck = load_checkpoint(argv[1]);
  } else {
    DenoiserConfig dc;
    dc.image_size = 32;
    dc.embed_dim = 24;
    dc.depths = {2, 2};
    dc.num_heads = {3, 6};
    TrainConfig tc;
    tc.total_steps = 600;
    tc.learning_rate = 5e-4;
    ScheduleParams sp;
    sp.steps = 100;
    auto corpus = tissue_corpus(200, 32, 1);
    const auto t0 = std::chrono::steady_clock::now();
    ck = train(corpus, dc, tc, sp, {}, [&](std::int64_t step, double loss) {
           if (step % 100 == 0)
             std::printf("step %lld loss %.4f (%.0f s)\n", static_cast<long long>(step), loss,
                         std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
         }).final;
  }

  const auto size = std::size_t(ck.config.image_size);
  const ImageTensor clean = tissue_texture(size, 4242);
  SyntheticArtifactSpec spec;
  spec.kind = ArtifactKind::ink;
  spec.seed = 7;
  const auto syn = synthesize_artifact(clean, spec);

  const ArtifactMask found = detect_artifacts(syn.corrupted);
  std::printf("detector IoU vs painted mask: %.3f (%.1f%% of pixels)\n", intersection_over_union(found, syn.truth),
              100 * found.coverage());

  const auto tr = restore(syn.corrupted.converted(ValueDomain::signed11), found, ck.weights, ck.config,
                          ck.schedule.build(), {}, 1);
  const auto restored = tr.final.converted(ValueDomain::unit01);
  std::printf("masked L2 (byte scale): corrupted %.1f, restored %.1f\n",
              l2_region(clean.converted(ValueDomain::byte255), syn.corrupted.converted(ValueDomain::byte255), syn.truth),
              l2_region(clean.converted(ValueDomain::byte255), restored.converted(ValueDomain::byte255), syn.truth));
  write_strip(out, {clean, syn.corrupted, restored});
  std::printf("wrote %s\n", out.c_str());
}
