// Dependency-free consumer for tshm sessions.
//
// Reads the line-oriented key=value session metadata, attaches the named
// shared-memory regions, validates the byte-level layout, computes a value
// sum, an order-independent coordinate hash, and a mode-0 MTTKRP row against
// all-ones rank-1 factors, writes a sentinel into values slot 0 of partition
// 0, publishes a minimal result region, and signals DONE through the flag
// cell. Prints one line:
//
//   OK nnz=<n> valsum=<v> coordhash=<0x...> mttkrp0=<x>
//
// Exit status 0 on success; any validation failure signals ERROR with the
// protocol's error code and exits nonzero.
//
// Build: g++ -O2 -std=c++17 -Wall -Wextra -o tshm_cpp_consumer tshm_consumer.cpp

#include <cerrno>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <time.h>
#include <unistd.h>

#if __BYTE_ORDER__ != __ORDER_LITTLE_ENDIAN__
#error "this consumer assumes a little-endian host"
#endif

namespace {

constexpr uint32_t kFlagMagic = 0x54534D31;    // "TSM1"
constexpr uint32_t kResultMagic = 0x54534D52;  // "TSMR"
constexpr uint32_t kStatusReady = 1;
constexpr uint32_t kStatusDone = 2;
constexpr uint32_t kStatusError = 3;
constexpr uint32_t kErrMetadata = 1;
constexpr uint32_t kErrRegionMissing = 2;
constexpr uint32_t kErrLayout = 3;
constexpr double kSentinel = -6504609.5;

struct Partition {
  std::string coords_region;
  std::string values_region;
  std::vector<uint64_t> box_lower;
  std::vector<uint64_t> box_upper;
  uint64_t count = 0;
  uint64_t capacity = 0;
};

struct Metadata {
  std::string session;
  std::string backing_dir;
  std::string flag_region;
  std::string result_region;
  std::string endianness;
  uint64_t d = 0;
  uint64_t nnz = 0;
  uint64_t index_width = 0;
  uint64_t value_width = 0;
  uint64_t index_base = 0;
  std::vector<uint64_t> dims;
  std::vector<Partition> partitions;
};

struct Mapping {
  void* addr = nullptr;
  size_t len = 0;
};

[[noreturn]] void die(const std::string& msg) {
  std::fprintf(stderr, "tshm_cpp_consumer: %s\n", msg.c_str());
  std::exit(1);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<uint64_t> parse_u64_list(const std::string& s) {
  std::vector<uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(std::stoull(trim(item)));
  }
  return out;
}

Metadata parse_metadata(const std::string& path) {
  std::ifstream in(path);
  if (!in) die("cannot open metadata file: " + path);
  Metadata md;
  std::map<std::string, std::string> globals;
  std::vector<std::map<std::string, std::string>> blocks;
  std::map<std::string, std::string>* current = &globals;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      const std::string prefix = "[partition ";
      if (line.compare(0, prefix.size(), prefix) != 0 || line.back() != ']')
        die("bad section header: " + line);
      size_t index = std::stoull(line.substr(prefix.size(),
                                             line.size() - prefix.size() - 1));
      if (index != blocks.size()) die("partition blocks out of order");
      blocks.emplace_back();
      current = &blocks.back();
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) die("expected key=value: " + line);
    (*current)[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }

  auto need = [](std::map<std::string, std::string>& m, const char* key) {
    auto it = m.find(key);
    if (it == m.end()) die(std::string("missing metadata key: ") + key);
    return it->second;
  };

  if (std::stoull(need(globals, "version")) != 1) die("unsupported version");
  md.session = need(globals, "session");
  md.d = std::stoull(need(globals, "d"));
  md.dims = parse_u64_list(need(globals, "dims"));
  md.nnz = std::stoull(need(globals, "nnz"));
  md.index_width = std::stoull(need(globals, "index_width_bits"));
  md.value_width = std::stoull(need(globals, "value_width_bits"));
  md.endianness = need(globals, "endianness");
  md.index_base = std::stoull(need(globals, "index_base"));
  md.backing_dir = need(globals, "backing_dir");
  md.flag_region = need(globals, "flag_region");
  md.result_region = need(globals, "result_region");
  uint64_t p_count = std::stoull(need(globals, "P"));
  if (md.dims.size() != md.d) die("dims length mismatch");
  if (blocks.size() != p_count) die("partition block count mismatch");
  for (auto& b : blocks) {
    Partition p;
    p.coords_region = need(b, "coords_region");
    p.values_region = need(b, "values_region");
    p.box_lower = parse_u64_list(need(b, "box_lower"));
    p.box_upper = parse_u64_list(need(b, "box_upper"));
    p.count = std::stoull(need(b, "count"));
    p.capacity = std::stoull(need(b, "capacity"));
    if (p.box_lower.size() != md.d || p.box_upper.size() != md.d)
      die("box rank mismatch");
    md.partitions.push_back(std::move(p));
  }
  return md;
}

// Region names are "/name"; when the backing dir is /dev/shm this is exactly
// the POSIX shm namespace, otherwise the regions are plain files.
int open_region(const Metadata& md, const std::string& name, bool create,
                size_t create_len) {
  int flags = create ? O_RDWR | O_CREAT | O_EXCL : O_RDWR;
  int fd;
  if (md.backing_dir == "/dev/shm") {
    fd = shm_open(name.c_str(), flags, 0600);
  } else {
    fd = open((md.backing_dir + name).c_str(), flags, 0600);
  }
  if (fd >= 0 && create && ftruncate(fd, (off_t)create_len) != 0) {
    close(fd);
    return -1;
  }
  return fd;
}

Mapping map_fd(int fd) {
  struct stat st;
  if (fstat(fd, &st) != 0) return {};
  void* addr = mmap(nullptr, (size_t)st.st_size, PROT_READ | PROT_WRITE,
                    MAP_SHARED, fd, 0);
  if (addr == MAP_FAILED) return {};
  return {addr, (size_t)st.st_size};
}

struct Flag {
  Mapping m;
  volatile uint32_t* words() const { return (volatile uint32_t*)m.addr; }
  uint32_t magic() const { return __atomic_load_n(&words()[0], __ATOMIC_ACQUIRE); }
  uint32_t status() const { return __atomic_load_n(&words()[1], __ATOMIC_ACQUIRE); }
  void signal(uint32_t status, uint32_t code) {
    if (status == kStatusError)
      __atomic_store_n(&words()[2], code, __ATOMIC_RELEASE);
    __atomic_store_n(&words()[1], status, __ATOMIC_RELEASE);
  }
};

[[noreturn]] void fail(Flag& flag, uint32_t code, const std::string& msg) {
  flag.signal(kStatusError, code);
  die(msg + " (signaled ERROR " + std::to_string(code) + ")");
}

// exponential backoff 1us..1ms, like the Python side
bool wait_ready(Flag& flag, double timeout_s) {
  struct timespec t0, now;
  clock_gettime(CLOCK_MONOTONIC, &t0);
  long delay_ns = 1000;
  for (;;) {
    if (flag.magic() != kFlagMagic) die("flag cell corrupt: bad magic");
    uint32_t st = flag.status();
    if (st == kStatusError) die("producer signaled ERROR before READY");
    if (st >= kStatusReady) return true;
    clock_gettime(CLOCK_MONOTONIC, &now);
    double elapsed = (now.tv_sec - t0.tv_sec) + (now.tv_nsec - t0.tv_nsec) * 1e-9;
    if (elapsed > timeout_s) return false;
    struct timespec ts = {0, delay_ns};
    nanosleep(&ts, nullptr);
    if (delay_ns < 1000000) delay_ns *= 2;
  }
}

struct Kahan {
  double sum = 0.0, comp = 0.0;
  void add(double x) {
    double y = x - comp;
    double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

uint64_t fnv1a_coord(const uint64_t* coord, uint64_t d) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (uint64_t m = 0; m < d; ++m) {
    uint64_t c = coord[m];
    for (int byte = 0; byte < 8; ++byte) {
      h ^= (c >> (8 * byte)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2 || argc > 3) {
    std::fprintf(stderr, "usage: %s METADATA_FILE [TIMEOUT_S]\n", argv[0]);
    return 2;
  }
  double timeout_s = argc == 3 ? std::stod(argv[2]) : 30.0;
  Metadata md = parse_metadata(argv[1]);

  int flag_fd = open_region(md, md.flag_region, false, 0);
  if (flag_fd < 0) die("cannot open flag region " + md.flag_region);
  Flag flag{map_fd(flag_fd)};
  close(flag_fd);
  if (!flag.m.addr || flag.m.len < 64) die("cannot map flag region");
  if (flag.magic() != kFlagMagic) die("flag cell corrupt: bad magic");
  if (!wait_ready(flag, timeout_s)) die("timed out waiting for READY");

  // layout validation against this build: 64-bit LE indices and values
  if (md.index_width != 64 || md.value_width != 64)
    fail(flag, kErrLayout, "width mismatch: need 64/64-bit");
  if (md.endianness != "LE")
    fail(flag, kErrLayout, "endianness mismatch: need LE");
  if (md.index_base != 0)
    fail(flag, kErrLayout, "unsupported index base");

  struct Attached {
    const uint64_t* coords;
    double* values;
    Mapping cm, vm;
  };
  std::vector<Attached> parts;
  uint64_t total = 0;
  for (size_t k = 0; k < md.partitions.size(); ++k) {
    const Partition& p = md.partitions[k];
    if (p.count > p.capacity)
      fail(flag, kErrMetadata, "partition count exceeds capacity");
    int cfd = open_region(md, p.coords_region, false, 0);
    int vfd = open_region(md, p.values_region, false, 0);
    if (cfd < 0 || vfd < 0)
      fail(flag, kErrRegionMissing, "partition region missing");
    Attached a;
    a.cm = map_fd(cfd);
    a.vm = map_fd(vfd);
    close(cfd);
    close(vfd);
    if (!a.cm.addr || !a.vm.addr)
      fail(flag, kErrRegionMissing, "cannot map partition region");
    if (a.cm.len != p.capacity * md.d * 8 || a.vm.len != p.capacity * 8)
      fail(flag, kErrLayout, "region length does not match capacity");
    a.coords = (const uint64_t*)a.cm.addr;
    a.values = (double*)a.vm.addr;
    for (uint64_t i = 0; i < p.count; ++i) {
      const uint64_t* coord = a.coords + i * md.d;
      for (uint64_t m = 0; m < md.d; ++m) {
        if (coord[m] < p.box_lower[m] || coord[m] > p.box_upper[m] ||
            coord[m] >= md.dims[m])
          fail(flag, kErrMetadata,
               "coordinate outside its bounding box in partition " +
                   std::to_string(k));
      }
    }
    total += p.count;
    parts.push_back(a);
  }
  if (total != md.nnz)
    fail(flag, kErrMetadata, "partition counts do not sum to nnz");

  // checksums and the all-ones rank-1 mode-0 MTTKRP row 0, before any writes
  Kahan valsum, row0;
  uint64_t coordhash = 0;
  for (size_t k = 0; k < md.partitions.size(); ++k) {
    const Partition& p = md.partitions[k];
    const Attached& a = parts[k];
    for (uint64_t i = 0; i < p.count; ++i) {
      valsum.add(a.values[i]);
      coordhash ^= fnv1a_coord(a.coords + i * md.d, md.d);
      if (a.coords[i * md.d] == 0) row0.add(a.values[i]);
    }
  }

  // zero-copy proof: the producer observes this through its own mapping
  parts[0].values[0] = kSentinel;

  // minimal result: R=1, all-ones factors, weights = [valsum]
  uint64_t dims_total = 0;
  for (uint64_t n : md.dims) dims_total += n;
  size_t payload = 16 + 8 * md.d + 8 * 1 + 8 * dims_total;
  int rfd = open_region(md, md.result_region, true, payload);
  if (rfd < 0) fail(flag, kErrRegionMissing, "cannot create result region");
  Mapping rm = map_fd(rfd);
  close(rfd);
  if (!rm.addr) fail(flag, kErrRegionMissing, "cannot map result region");
  {
    uint32_t* head = (uint32_t*)rm.addr;
    head[0] = kResultMagic;
    head[1] = 1;  // R
    head[2] = (uint32_t)md.d;
    head[3] = 0;
    uint64_t* dims_out = (uint64_t*)((char*)rm.addr + 16);
    for (uint64_t m = 0; m < md.d; ++m) dims_out[m] = md.dims[m];
    double* body = (double*)((char*)rm.addr + 16 + 8 * md.d);
    body[0] = valsum.sum;
    for (uint64_t i = 0; i < dims_total; ++i) body[1 + i] = 1.0;
  }
  munmap(rm.addr, rm.len);

  flag.signal(kStatusDone, 0);

  std::printf("OK nnz=%" PRIu64 " valsum=%.17g coordhash=0x%016" PRIx64
              " mttkrp0=%.17g\n",
              total, valsum.sum, coordhash, row0.sum);

  for (auto& a : parts) {
    munmap((void*)a.cm.addr, a.cm.len);
    munmap((void*)a.vm.addr, a.vm.len);
  }
  munmap((void*)flag.m.addr, flag.m.len);
  return 0;
}
